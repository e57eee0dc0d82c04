"""Completeness-weighted fusion of per-view codes and k-means prototypes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np


@dataclass
class PrototypeSet:
    prototypes: np.ndarray                  # K x d, unit rows
    per_view: Optional[List[np.ndarray]] = None

    @property
    def k(self) -> int:
        return self.prototypes.shape[0]


def completeness_weights(mask: np.ndarray) -> np.ndarray:
    """w[i, v] = 1 / (#views observing i) where observed, else 0."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError(f"instances {np.flatnonzero(counts == 0)[:5].tolist()} have no observed view")
    return mask / counts[:, None]


def fuse(reps: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """Weighted sum over views.  Rows with zero weight are never read, so they may hold NaN."""
    weights = np.asarray(weights, dtype=np.float64)
    out = np.zeros((weights.shape[0], np.asarray(reps[0]).shape[1]))
    for v, z in enumerate(reps):
        rows = weights[:, v] > 0
        out[rows] += weights[rows, v, None] * np.asarray(z, dtype=np.float64)[rows]
    return out


def scatter_rows(rows_by_view: Sequence[np.ndarray], mask: np.ndarray) -> List[np.ndarray]:
    """Place per-view observed-row matrices into N-row matrices padded with NaN."""
    mask = np.asarray(mask, dtype=bool)
    full = []
    for v, rows in enumerate(rows_by_view):
        rows = np.asarray(rows, dtype=np.float64)
        out = np.full((mask.shape[0], rows.shape[1]), np.nan)
        out[mask[:, v]] = rows
        full.append(out)
    return full


# -- k-means ------------------------------------------------------------------

def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d2 = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = x.shape[0]
    chosen = [int(rng.integers(m))]
    closest = _sqdist(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(m, p=closest / total))
        else:
            free = np.setdiff1d(np.arange(m), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        closest = np.minimum(closest, _sqdist(x, x[idx:idx + 1])[:, 0])
    return x[chosen].copy()


def _fill_empty(x, d2, labels, k):
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        own = d2[np.arange(len(labels)), labels]
        own[counts[labels] <= 1] = -1.0
        i = int(np.argmax(own))
        counts[labels[i]] -= 1
        labels[i] = j
        counts[j] = 1
    return labels


def _means(x, labels, k):
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    return sums / np.bincount(labels, minlength=k)[:, None]


def _lloyd(x, centers, max_iter, tol):
    k = centers.shape[0]
    history = []
    for _ in range(max_iter):
        d2 = _sqdist(x, centers)
        labels = _fill_empty(x, d2, d2.argmin(axis=1), k)
        new = _means(x, labels, k)
        history.append(float(((x - new[labels]) ** 2).sum()))
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    d2 = _sqdist(x, centers)
    labels = _fill_empty(x, d2, d2.argmin(axis=1), k)
    centers = _means(x, labels, k)
    inertia = float(((x - centers[labels]) ** 2).sum())
    history.append(inertia)
    return centers, labels, inertia, history


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    n_init: int = 10,
    return_history: bool = False,
):
    """Lloyd's algorithm from k-means++ seeds; best of ``n_init`` restarts.

    Returns ``(centroids, labels)``, or ``(centroids, labels, inertia_history)``
    for the winning restart when ``return_history`` is set.  No returned
    cluster is empty.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("points must be a 2-D matrix")
    if k < 1 or x.shape[0] < k:
        raise ValueError(f"cannot form {k} clusters from {x.shape[0]} points")
    if not np.isfinite(x).all():
        raise ValueError("points contain non-finite values")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        run = _lloyd(x, _plusplus(x, k, rng), max_iter, tol)
        if best is None or run[2] < best[2] - 1e-12:
            best = run
    centers, labels, _, history = best
    if return_history:
        return centers, labels, history
    return centers, labels


def unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    uniform = np.full_like(x, 1.0 / np.sqrt(x.shape[1]))
    return np.where(norm > 0, x / np.where(norm > 0, norm, 1.0), uniform)


def consensus_prototypes(consensus_reps: np.ndarray, k: int, seed: int = 0) -> PrototypeSet:
    centers, _ = kmeans(consensus_reps, k, seed=seed)
    return PrototypeSet(unit_rows(centers))


def per_view_prototypes(reps: Sequence[np.ndarray], k: int, seed: int = 0) -> List[np.ndarray]:
    """Independent k-means centroids on each view's observed semantic rows."""
    out = []
    for v, h in enumerate(reps):
        if np.asarray(h).shape[0] < k:
            raise ValueError(f"view {v} has {np.asarray(h).shape[0]} observed rows, fewer than k={k}")
        out.append(kmeans(h, k, seed=seed + v)[0])
    return out
