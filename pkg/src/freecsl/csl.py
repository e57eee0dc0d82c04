"""Cross-view consensus semantic learning.

Semantic codes are scored against shared prototypes; each view's soft
assignment is distilled towards the other view's balanced transport
pseudo-labels on the instances both views observe.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import torch

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class CslConfig:
    temperature: float = 0.1
    alpha: float = 0.5
    sinkhorn_iters: int = 3

    def __post_init__(self):
        if not 0.0 < self.temperature <= 1.0:
            raise ValueError(f"temperature must lie in (0, 1], got {self.temperature}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.sinkhorn_iters < 1:
            raise ValueError("sinkhorn_iters must be >= 1")


def _like(x, ref=None) -> torch.Tensor:
    dtype = ref.dtype if torch.is_tensor(ref) else torch.float64
    if torch.is_tensor(x):
        return x if ref is None else x.to(ref.dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def soft_assign(h, prototypes, temperature: float) -> torch.Tensor:
    """Row-wise softmax of h . c_k / temperature."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    h = _like(h)
    c = _like(prototypes, h)
    scores = h @ c.T / temperature
    scores = scores - scores.max(dim=1, keepdim=True).values
    return torch.softmax(scores, dim=1)


@torch.no_grad()
def sinkhorn_labels(h, prototypes, alpha: float, iters: int = 3, return_plan: bool = False):
    """Balanced pseudo-labels by entropic optimal transport.

    Maximizes sum(Q * S) + alpha * entropy(Q) over B x K matrices with row
    sums 1/B and column sums 1/K, where S = h c^T.  Each round rescales
    columns then rows (in log space).  The returned labels are the plan's
    rows rescaled to sum to one; with ``return_plan`` the unscaled plan is
    returned as well.
    """
    h = _like(h).detach()
    c = _like(prototypes, h)
    scores = h @ c.T
    if not torch.isfinite(scores).all():
        raise FloatingPointError("non-finite transport scores")
    b, k = scores.shape
    if b < 1:
        raise ValueError("need at least one row")
    log_q = scores / alpha
    log_q = log_q - torch.logsumexp(log_q.reshape(-1), dim=0)
    for _ in range(iters):
        log_q = log_q - torch.logsumexp(log_q, dim=0, keepdim=True) - np.log(k)
        log_q = log_q - torch.logsumexp(log_q, dim=1, keepdim=True) - np.log(b)
    plan = log_q.exp()
    labels = plan / plan.sum(dim=1, keepdim=True)
    if return_plan:
        return labels, plan
    return labels


def kd_loss(p, q) -> torch.Tensor:
    """Mean over rows of the cross-entropy -sum_k q log p."""
    return -(q * torch.log(p.clamp_min(LOG_FLOOR))).sum(dim=1).mean()


def swapped_kd_pair(p_m, q_n, p_n, q_m) -> torch.Tensor:
    """Two-direction swapped distillation between a pair of views."""
    shapes = {tuple(t.shape) for t in (p_m, q_n, p_n, q_m)}
    if len(shapes) != 1:
        raise ValueError(f"assignment shapes differ: {sorted(shapes)}")
    if p_m.shape[0] == 0:
        warnings.warn("no paired instances; swapped loss is zero", RuntimeWarning, stacklevel=2)
        return p_m.sum() * 0.0
    return kd_loss(p_m, q_n) + kd_loss(p_n, q_m)


def cc_loss(
    semantic: Sequence[Tuple[np.ndarray, torch.Tensor]],
    prototypes,
    config: CslConfig,
) -> torch.Tensor:
    """Contrastive clustering loss over all view pairs.

    ``semantic[v]`` is ``(instance_ids, H)`` for the rows of view ``v`` at
    hand, ids sorted ascending.  Each unordered pair contributes its
    two-direction swapped loss once, i.e. every ordered pair (m, n) adds one
    distillation direction.

    Pseudo-labels are solved on the same temperature-scaled scores the soft
    assignments use, so the transport sees h.c / temperature with entropy
    weight ``alpha``.
    """
    total = None
    n_views = len(semantic)
    for m in range(n_views):
        for n in range(m + 1, n_views):
            ids_m, h_m = semantic[m]
            ids_n, h_n = semantic[n]
            common = np.intersect1d(ids_m, ids_n, assume_unique=True)
            if common.size == 0:
                continue
            hm = h_m[np.searchsorted(ids_m, common)]
            hn = h_n[np.searchsorted(ids_n, common)]
            term = swapped_kd_pair(
                soft_assign(hm, prototypes, config.temperature),
                sinkhorn_labels(hn / config.temperature, prototypes, config.alpha, config.sinkhorn_iters),
                soft_assign(hn, prototypes, config.temperature),
                sinkhorn_labels(hm / config.temperature, prototypes, config.alpha, config.sinkhorn_iters),
            )
            total = term if total is None else total + term
    if total is None:
        ref = semantic[0][1] if semantic else torch.zeros(())
        return ref.sum() * 0.0
    return total


def total_cc_loss(state, dataset, prototypes, batch, config: CslConfig) -> torch.Tensor:
    """Contrastive clustering loss for the instances in ``batch``."""
    batch = np.sort(np.asarray(batch))
    semantic = []
    for v in range(dataset.n_views):
        ids = batch[dataset.mask[batch, v]]
        h = state.contrastive_head(state.encode(dataset.views[v][ids], v))
        semantic.append((ids, h))
    protos = getattr(prototypes, "prototypes", prototypes)
    return cc_loss(semantic, protos, config)
