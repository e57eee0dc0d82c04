import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from freecsl.csl import (
    CslConfig,
    cc_loss,
    kd_loss,
    sinkhorn_labels,
    soft_assign,
    swapped_kd_pair,
    total_cc_loss,
)
from freecsl.data import MultiViewDataset
from freecsl.fusion import unit_rows
from freecsl.nets import init_params
from conftest import tiny_config, tiny_dataset

T = torch.tensor


# -- soft_assign -------------------------------------------------------------------

def test_soft_assign_identical_prototypes():
    p = soft_assign(unit_rows(np.ones((3, 4))), np.ones((2, 4)) / 2, 0.1)
    assert torch.allclose(p, torch.full((3, 2), 0.5, dtype=p.dtype))


def test_soft_assign_closed_form():
    p = soft_assign(np.array([[1.0, 0.0]]), np.eye(2), 1.0)
    assert torch.allclose(p, T([[math.e / (math.e + 1), 1 / (math.e + 1)]], dtype=p.dtype))


def test_soft_assign_low_temperature():
    p = soft_assign(np.eye(3)[:1], np.eye(3), 0.01)
    assert p[0, 0] > 0.999
    assert math.isclose(float(p[0, 0]), math.exp(100) / (math.exp(100) + 2), rel_tol=1e-12)


def test_soft_assign_rejects_bad_temperature():
    with pytest.raises(ValueError):
        soft_assign(np.eye(2), np.eye(2), 0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), shift=st.floats(-50, 50))
def test_soft_assign_rows_and_shift(seed, shift):
    rng = np.random.default_rng(seed)
    h, c = unit_rows(rng.normal(size=(6, 5))), unit_rows(rng.normal(size=(3, 5)))
    p = soft_assign(h, c, 0.2)
    assert torch.allclose(p.sum(1), torch.ones(6, dtype=p.dtype), atol=1e-9)
    # adding a constant to every score leaves the softmax unchanged: append a
    # coordinate that contributes `shift` to each score
    h2 = np.hstack([h, np.ones((6, 1))])
    c2 = np.hstack([c, np.full((3, 1), shift)])
    assert torch.allclose(soft_assign(h2, c2, 0.2), p, atol=1e-9)


# -- sinkhorn_labels ----------------------------------------------------------------

def _objective(q, s, alpha):
    """Transport score plus alpha times entropy; ``q`` may carry leading batch axes."""
    q = np.asarray(q, dtype=np.float64)
    safe = np.where(q > 0, q, 1.0)
    ent = -np.sum(np.where(q > 0, q * np.log(safe), 0.0), axis=(-2, -1))
    return np.sum(q * s, axis=(-2, -1)) + alpha * ent


def _grid_2x2(s, alpha, steps=200001):
    a = np.linspace(0.0, 0.5, steps)
    qs = np.stack([np.stack([a, 0.5 - a], -1), np.stack([0.5 - a, a], -1)], 1)
    return float(_objective(qs, s, alpha).max())


def _polytope_3x3(x):
    """3x3 plans with margins 1/3 from the free entries q00 q01 q10 q11 (rows of ``x``)."""
    m = 1.0 / 3.0
    q00, q01, q10, q11 = x.T
    q02, q12 = m - q00 - q01, m - q10 - q11
    q20, q21 = m - q00 - q10, m - q01 - q11
    q22 = m - q20 - q21
    return np.stack([np.stack([q00, q01, q02], -1), np.stack([q10, q11, q12], -1),
                     np.stack([q20, q21, q22], -1)], 1)


def _grid_3x3(s, alpha):
    """Zooming dense grid over the 4-parameter 3x3 transportation polytope."""
    center, width, best = np.full(4, 1.0 / 9.0), 1.0 / 3.0, -np.inf
    for _ in range(16):
        axes = [np.linspace(max(0.0, c - width), min(1 / 3, c + width), 11) for c in center]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 4)
        qs = _polytope_3x3(grid)
        feasible = qs.min(axis=(1, 2)) >= 0
        vals = np.where(feasible, _objective(qs, s, alpha), -np.inf)
        i = int(np.argmax(vals))
        if vals[i] > best:
            best, center = float(vals[i]), grid[i]
        width /= 2.5
    return best


def _plan(s, alpha, iters=500):
    labels, plan = sinkhorn_labels(s, np.eye(s.shape[1]), alpha, iters, return_plan=True)
    return labels.numpy(), plan.numpy()


def test_sinkhorn_uniform_scores():
    labels = sinkhorn_labels(np.ones((5, 3)), np.eye(3), 0.5, 3)
    assert torch.allclose(labels, torch.full((5, 3), 1 / 3, dtype=labels.dtype))


def test_sinkhorn_identity_2x2_grid():
    s = np.eye(2)
    _, plan = _plan(s, 0.5)
    assert abs(_objective(plan, s, 0.5) - _grid_2x2(s, 0.5)) < 1e-3


def test_sinkhorn_random_2x2_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s, alpha = rng.normal(size=(2, 2)), float(rng.uniform(0.2, 2.0))
        _, plan = _plan(s, alpha)
        assert abs(_objective(plan, s, alpha) - _grid_2x2(s, alpha)) < 1e-3


def test_sinkhorn_random_3x3_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        s, alpha = rng.normal(size=(3, 3)), float(rng.uniform(0.2, 2.0))
        _, plan = _plan(s, alpha)
        assert abs(_objective(plan, s, alpha) - _grid_3x3(s, alpha)) < 1e-3


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), b=st.integers(1, 12), k=st.integers(2, 6))
def test_sinkhorn_marginals(seed, b, k):
    s = np.random.default_rng(seed).normal(size=(b, k))
    # 10 rounds leave column errors near 1e-2 on badly conditioned draws; 500 reach 1e-15
    labels, plan = _plan(s, 0.5, iters=500)
    assert np.allclose(plan.sum(axis=0), 1.0 / k, atol=1e-6)
    assert np.allclose(plan.sum(axis=1), 1.0 / b, atol=1e-6)
    assert np.allclose(labels.sum(axis=1), 1.0) and labels.min() >= 0


def test_sinkhorn_large_alpha_is_uniform(rng):
    for _ in range(10):
        labels = sinkhorn_labels(unit_rows(rng.normal(size=(8, 4))), unit_rows(rng.normal(size=(3, 4))), 100.0, 10)
        assert float((labels - 1 / 3).abs().max()) < 1e-2


def test_sinkhorn_blocks_gradient():
    h = torch.eye(2, dtype=torch.float64, requires_grad=True)
    assert not sinkhorn_labels(h, np.eye(2), 0.5).requires_grad


def test_sinkhorn_non_finite():
    with pytest.raises(FloatingPointError):
        sinkhorn_labels(np.array([[np.nan, 0.0]]), np.eye(2), 0.5)


# -- swapped distillation --------------------------------------------------------

def test_swapped_uniform_value():
    u = torch.full((4, 2), 0.5, dtype=torch.float64)
    assert math.isclose(float(swapped_kd_pair(u, u, u, u)), 2 * math.log(2), rel_tol=1e-12)


def test_swapped_matched_limit():
    q = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    p = torch.tensor([[1 - 1e-9, 1e-9], [1e-9, 1 - 1e-9]], dtype=torch.float64)
    assert float(swapped_kd_pair(p, q, p, q)) < 1e-8


def test_swapped_symmetric_and_shape_checked(rng):
    pm, qn, pn, qm = (torch.softmax(torch.tensor(rng.normal(size=(5, 3))), 1) for _ in range(4))
    assert torch.isclose(swapped_kd_pair(pm, qn, pn, qm), swapped_kd_pair(pn, qm, pm, qn))
    with pytest.raises(ValueError):
        swapped_kd_pair(pm, qn[:4], pn, qm)


def test_swapped_empty_warns():
    e = torch.zeros((0, 2), dtype=torch.float64)
    with pytest.warns(RuntimeWarning):
        assert float(swapped_kd_pair(e, e, e, e)) == 0.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_swapped_bounds(seed):
    rng = np.random.default_rng(seed)
    pm, qn, pn, qm = (torch.softmax(torch.tensor(rng.normal(size=(6, 4)) * 3), 1) for _ in range(4))
    loss = float(swapped_kd_pair(pm, qn, pn, qm))
    ent = lambda q: float(-(q * torch.log(q)).sum(1).mean())
    assert loss >= ent(qn) + ent(qm) - 1e-12 >= 0


def test_kd_log_floor():
    p = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    q = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    assert math.isclose(float(kd_loss(p, q)), -math.log(1e-12), rel_tol=1e-12)


# -- total loss -------------------------------------------------------------------------

def _pair_value(h_m, h_n, c, cfg):
    scaled = lambda h: h / cfg.temperature
    return swapped_kd_pair(soft_assign(h_m, c, cfg.temperature),
                           sinkhorn_labels(scaled(h_n), c, cfg.alpha, cfg.sinkhorn_iters),
                           soft_assign(h_n, c, cfg.temperature),
                           sinkhorn_labels(scaled(h_m), c, cfg.alpha, cfg.sinkhorn_iters))


def test_cc_two_views_is_one_pair(rng):
    cfg = CslConfig()
    ids = np.arange(6)
    h1, h2 = (torch.tensor(unit_rows(rng.normal(size=(6, 4)))) for _ in range(2))
    c = unit_rows(rng.normal(size=(3, 4)))
    assert torch.isclose(cc_loss([(ids, h1), (ids, h2)], c, cfg), _pair_value(h1, h2, c, cfg))


def test_cc_three_identical_views(rng):
    cfg = CslConfig()
    ids = np.arange(5)
    h = torch.tensor(unit_rows(rng.normal(size=(5, 4))))
    c = unit_rows(rng.normal(size=(2, 4)))
    assert torch.isclose(cc_loss([(ids, h)] * 3, c, cfg), 3 * _pair_value(h, h, c, cfg))


def test_cc_pairs_only_common_ids(rng):
    cfg = CslConfig()
    h1, h2 = (torch.tensor(unit_rows(rng.normal(size=(4, 3)))) for _ in range(2))
    c = unit_rows(rng.normal(size=(2, 3)))
    got = cc_loss([(np.array([0, 2, 5, 7]), h1), (np.array([2, 3, 7, 9]), h2)], c, cfg)
    assert torch.isclose(got, _pair_value(h1[[1, 3]], h2[[0, 2]], c, cfg))


def test_total_cc_single_view_is_zero():
    ds = tiny_dataset(rate=0.0, dims=(4,))
    state = init_params(tiny_config().architecture(ds), seed=0, dtype=torch.float64)
    loss = total_cc_loss(state, ds, unit_rows(np.eye(2, 4)), np.arange(ds.n), CslConfig())
    assert float(loss.detach()) == 0.0


def test_total_cc_finite_for_extreme_codes():
    ds = tiny_dataset()
    state = init_params(tiny_config().architecture(ds), seed=0, dtype=torch.float64)
    with torch.no_grad():
        state.head.weight.mul_(1e6)
    loss = total_cc_loss(state, ds, unit_rows(np.eye(2, 4)), np.arange(ds.n), CslConfig(temperature=0.01))
    assert torch.isfinite(loss)


def test_config_validation():
    for bad in (dict(temperature=0.0), dict(temperature=1.5), dict(alpha=0.0), dict(sinkhorn_iters=0)):
        with pytest.raises(ValueError):
            CslConfig(**bad)
