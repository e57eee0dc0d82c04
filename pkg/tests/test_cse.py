import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from freecsl.cse import (
    CseConfig,
    ViewGraph,
    kl_modularity_loss,
    knn_adjacency,
    modularity,
    modularity_matrix,
    node_assign,
    t_dist_labels,
    total_gc_loss,
    write_edge_list,
)
from freecsl.data import MultiViewDataset
from freecsl.nets import init_params
from conftest import tiny_config, tiny_dataset


def two_edges() -> ViewGraph:
    a = np.zeros((4, 4))
    a[0, 1] = a[1, 0] = a[2, 3] = a[3, 2] = 1
    return ViewGraph(a)


def random_graph(rng, n) -> ViewGraph:
    a = np.triu((rng.random((n, n)) < 0.3).astype(float), 1)
    a = a + a.T
    if a.sum() == 0:
        a[0, 1] = a[1, 0] = 1
    return ViewGraph(a)


# -- graphs -------------------------------------------------------------------------

def test_knn_collinear():
    g = knn_adjacency(np.array([[0.0], [1.0], [3.0]]), 1)
    assert g.edges() == [(0, 1), (1, 2)]


def test_knn_duplicates_and_ties():
    g = knn_adjacency(np.array([[0.0], [0.0], [5.0], [10.0]]), 1)
    assert g.adjacency[0, 1] == 1
    # node 2 is equidistant to 0 and 1 (and to 3): lowest index wins
    assert g.adjacency[2, 0] == 1 and g.adjacency[2, 1] == 0


def test_knn_complete():
    g = knn_adjacency(np.random.default_rng(0).normal(size=(5, 2)), 4)
    assert np.array_equal(g.adjacency, 1 - np.eye(5))


def test_knn_too_many_neighbors():
    with pytest.raises(ValueError):
        knn_adjacency(np.zeros((3, 2)), 3)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 25), k=st.integers(1, 5))
def test_knn_properties(seed, n, k):
    k = min(k, n - 1)
    g = knn_adjacency(np.random.default_rng(seed).normal(size=(n, 3)), k)
    a = g.adjacency
    assert np.array_equal(a, a.T) and np.all(np.diag(a) == 0)
    assert g.degrees.min() >= 1
    assert g.edge_count == a.sum() / 2


def test_viewgraph_validation():
    with pytest.raises(ValueError):
        ViewGraph(np.array([[0, 1], [0, 0]]))
    with pytest.raises(ValueError):
        ViewGraph(np.eye(2))


def test_edge_list(tmp_path):
    path = tmp_path / "edges.txt"
    write_edge_list(two_edges(), str(path))
    assert path.read_text() == "0 1\n2 3\n"


# -- modularity ---------------------------------------------------------------------

def test_modularity_matrix_hand_case():
    b = modularity_matrix(two_edges())
    assert (b[0, 1], b[0, 2], b[0, 0]) == (0.75, -0.25, -0.25)
    assert np.allclose(b, b.T)


def test_modularity_matrix_edgeless():
    with pytest.raises(ValueError):
        modularity_matrix(ViewGraph(np.zeros((3, 3))))


def test_component_partition_modularity():
    g = two_edges()
    p = torch.tensor([[1.0, 0], [1, 0], [0, 1], [0, 1]], dtype=torch.float64)
    loss = kl_modularity_loss(p, modularity_matrix(g), p.numpy(), 0.0, g.edge_count)
    assert math.isclose(float(loss), -0.5, abs_tol=1e-12)


def test_modularity_double_sum_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, k = int(rng.integers(2, 21)), int(rng.integers(1, 5))
        g = random_graph(rng, n)
        b = modularity_matrix(g)
        p = rng.dirichlet(np.ones(k), size=n)
        trace = np.trace(p.T @ b @ p)
        double = sum(b[i, j] * (p[i] @ p[j]) for i in range(n) for j in range(n))
        assert abs(trace - double) < 1e-8
        assert abs(float(modularity(p, b, g.edge_count)) * 2 * g.edge_count - double) < 1e-8
        assert np.abs(b.sum(axis=1)).max() < 1e-10


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 20), k=st.integers(1, 5))
def test_modularity_bounds(seed, n, k):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n)
    p = rng.dirichlet(np.ones(k), size=n)
    q = float(modularity(p, modularity_matrix(g), g.edge_count))
    assert -0.5 - 1e-12 <= q <= 1 + 1e-12


def test_uniform_assignment_zero_loss():
    a = np.roll(np.eye(6), 1, axis=1)
    g = ViewGraph(a + a.T)  # 6-cycle, 2-regular
    p = np.full((6, 3), 1 / 3)
    assert abs(float(kl_modularity_loss(p, modularity_matrix(g), p, 0.1, g.edge_count))) < 1e-12


def test_kl_term(rng):
    g = random_graph(rng, 8)
    b = modularity_matrix(g)
    p = rng.dirichlet(np.ones(3), size=8)
    lab = rng.dirichlet(np.ones(3), size=8)
    base = float(kl_modularity_loss(p, b, p, 0.3, g.edge_count))
    assert math.isclose(base, -float(modularity(p, b, g.edge_count)), abs_tol=1e-12)
    kl = float(np.sum(lab * np.log(lab / p)))
    got = float(kl_modularity_loss(p, b, lab, 0.3, g.edge_count))
    assert math.isclose(got, base + 0.3 * kl, rel_tol=1e-10) and kl >= 0


def test_loss_permutation_invariant(rng):
    g = random_graph(rng, 9)
    b = modularity_matrix(g)
    p, lab = rng.dirichlet(np.ones(3), size=9), rng.dirichlet(np.ones(3), size=9)
    perm = rng.permutation(9)
    a = float(kl_modularity_loss(p, b, lab, 0.2, g.edge_count))
    c = float(kl_modularity_loss(p[perm], b[np.ix_(perm, perm)], lab[perm], 0.2, g.edge_count))
    assert math.isclose(a, c, rel_tol=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        kl_modularity_loss(np.ones((3, 2)) / 2, np.zeros((4, 4)), np.ones((3, 2)) / 2, 0.1, 1.0)


# -- labels and assignments ----------------------------------------------------------------

def test_t_labels_examples():
    assert np.allclose(t_dist_labels(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0], [-1.0, 0.0]])), 0.5)
    got = t_dist_labels(np.array([[0.0, 0.0]]), np.array([[0.0, 0.0], [1.0, 0.0]]), 1.0)
    assert np.allclose(got, [[2 / 3, 1 / 3]])
    rows = t_dist_labels(np.random.default_rng(0).normal(size=(7, 3)), np.eye(3), 2.5)
    assert np.allclose(rows.sum(axis=1), 1.0)


def test_node_assign_zero_weights_uniform():
    ds = tiny_dataset(rate=0.0)
    state = init_params(tiny_config().architecture(ds), seed=0, dtype=torch.float64)
    with torch.no_grad():
        for p in list(state.gcns.parameters()) + list(state.classifier.parameters()):
            p.zero_()
    g = knn_adjacency(ds.observed(0), 3)
    p = node_assign(state.encode(ds.observed(0), 0), g, state, 0)
    assert torch.allclose(p, torch.full_like(p, 0.5))


def test_node_assign_rows_and_equivariance(rng):
    ds = tiny_dataset(rate=0.0)
    state = init_params(tiny_config().architecture(ds), seed=3, dtype=torch.float64)
    x = ds.observed(0)
    g = knn_adjacency(x, 3)
    z = state.encode(x, 0)
    p = node_assign(z, g, state, 0)
    assert torch.allclose(p.sum(1), torch.ones(len(x), dtype=p.dtype))
    perm = rng.permutation(len(x))
    gp = ViewGraph(g.adjacency[np.ix_(perm, perm)])
    assert torch.allclose(node_assign(z[perm], gp, state, 0), p[perm], atol=1e-12)


def test_total_gc_single_view_and_duplicate():
    one = tiny_dataset(rate=0.0, dims=(4,))
    state = init_params(tiny_config().architecture(one), seed=1, dtype=torch.float64)
    g = knn_adjacency(one.observed(0), 3)
    lab = np.full((one.n, 2), 0.5)
    cfg = CseConfig()
    z = state.encode(one.observed(0), 0)
    single = kl_modularity_loss(node_assign(z, g, state, 0), modularity_matrix(g), lab, cfg.kl_weight, g.edge_count)
    assert torch.isclose(total_gc_loss(state, one, [g], [lab], cfg), single)

    # a second view that duplicates the first (data and parameters) doubles the loss
    two = MultiViewDataset([one.views[0], one.views[0]], np.ones((one.n, 2), bool), one.labels, 2)
    twin = init_params(tiny_config().architecture(two), seed=1, dtype=torch.float64)
    twin.encoders[0].load_state_dict(state.encoders[0].state_dict())
    twin.encoders[1].load_state_dict(state.encoders[0].state_dict())
    twin.gcns[0].load_state_dict(state.gcns[0].state_dict())
    twin.gcns[1].load_state_dict(state.gcns[0].state_dict())
    twin.classifier.load_state_dict(state.classifier.state_dict())
    assert torch.isclose(total_gc_loss(twin, two, [g, g], [lab, lab], cfg), 2 * single)


def test_config_validation():
    for bad in (dict(neighbors=0), dict(kl_weight=-1.0), dict(t_dof=0.0)):
        with pytest.raises(ValueError):
            CseConfig(**bad)
