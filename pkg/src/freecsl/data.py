"""Multi-view datasets: loading, masking, normalization and index helpers.

Missing observations are stored as NaN rows so that any accidental read
poisons downstream arithmetic instead of silently contributing zeros.  The
mask is always the authority on what is observed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

MISSING = np.nan


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset inputs."""


class MaskError(ValueError):
    """Raised when a masking request cannot be satisfied."""


@dataclass(frozen=True)
class MaskSpec:
    missing_rate: float = 0.0
    seed: int = 0
    protocol: str = "instance-incomplete"

    def __post_init__(self):
        if not 0.0 <= self.missing_rate < 1.0:
            raise MaskError(f"missing rate must lie in [0, 1), got {self.missing_rate}")
        if self.protocol != "instance-incomplete":
            raise MaskError(f"unknown masking protocol {self.protocol!r}")


@dataclass
class MultiViewDataset:
    """Per-view feature matrices sharing N rows, plus an N x V observation mask."""

    views: list
    mask: np.ndarray
    labels: Optional[np.ndarray] = None
    n_clusters: int = 1
    name: str = field(default="dataset", compare=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.views = [np.array(x, dtype=np.float64) for x in self.views]
        if not self.views:
            raise DatasetError("dataset needs at least one view")
        n = self.views[0].shape[0]
        for v, x in enumerate(self.views):
            if x.ndim != 2:
                raise DatasetError(f"view {v} must be a 2-D matrix")
            if x.shape[0] != n:
                raise DatasetError(f"view {v} has {x.shape[0]} rows, expected {n}")
        if self.mask.shape != (n, len(self.views)):
            raise DatasetError(f"mask shape {self.mask.shape} != ({n}, {len(self.views)})")
        if not self.mask.any(axis=1).all():
            bad = np.flatnonzero(~self.mask.any(axis=1))
            raise DatasetError(f"instances {bad[:5].tolist()} are observed in no view")
        if self.n_clusters < 1:
            raise DatasetError("n_clusters must be positive")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise DatasetError(f"labels must have length {n}")
            if self.labels.min() < 0 or self.labels.max() >= self.n_clusters:
                raise DatasetError(f"labels must lie in [0, {self.n_clusters})")
        for v, x in enumerate(self.views):
            x[~self.mask[:, v]] = MISSING
            x.setflags(write=False)
        self.mask.setflags(write=False)

    @property
    def n(self) -> int:
        return self.views[0].shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> list:
        return [x.shape[1] for x in self.views]

    def observed(self, v: int) -> np.ndarray:
        """Observed rows of view ``v`` (the incomplete subset X~^v)."""
        return self.views[v][observed_rows(self.mask, v)]

    def with_mask(self, mask: np.ndarray) -> "MultiViewDataset":
        """Re-mask the dataset.  Rows already missing cannot be revived."""
        mask = np.asarray(mask, dtype=bool)
        if (mask & ~self.mask).any():
            raise DatasetError("new mask reveals rows that are missing in the source")
        return replace(self, mask=mask)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def generate_mask(n: int, v: int, spec: MaskSpec) -> np.ndarray:
    """Instance-incomplete mask.

    ``round(r * n)`` instances, picked by a seeded shuffle, become incomplete;
    each keeps a uniformly drawn nonempty strict subset of its views.
    """
    if n < 1 or v < 1:
        raise MaskError("need n >= 1 and v >= 1")
    n_incomplete = _round_half_up(spec.missing_rate * n)
    if v == 1 and n_incomplete > 0:
        raise MaskError("a single-view dataset cannot have incomplete instances (rate must be 0 when V=1)")
    rng = np.random.default_rng(spec.seed)
    mask = np.ones((n, v), dtype=bool)
    order = rng.permutation(n)
    chosen = np.sort(order[:n_incomplete])
    # nonempty strict subsets <-> bit patterns 1 .. 2^v - 2
    codes = rng.integers(1, 2**v - 1, size=n_incomplete)
    bits = (codes[:, None] >> np.arange(v)[None, :]) & 1
    mask[chosen] = bits.astype(bool)
    return mask


def normalize(dataset: MultiViewDataset) -> MultiViewDataset:
    """Min-max scale each feature to [0, 1] over observed rows; constant columns map to 0."""
    views = []
    for v, x in enumerate(dataset.views):
        rows = observed_rows(dataset.mask, v)
        out = x.copy()
        if rows.size:
            obs = x[rows]
            lo = obs.min(axis=0)
            span = obs.max(axis=0) - lo
            safe = np.where(span > 0, span, 1.0)
            scaled = (obs - lo) / safe
            scaled[:, span <= 0] = 0.0
            out[rows] = scaled
        views.append(out)
    return replace(dataset, views=views)


def _check_view(mask: np.ndarray, v: int) -> None:
    if not 0 <= v < mask.shape[1]:
        raise IndexError(f"view id {v} out of range for {mask.shape[1]} views")


def observed_rows(mask: np.ndarray, v: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    _check_view(mask, v)
    return np.flatnonzero(mask[:, v])


def paired_indices(mask: np.ndarray, m: int, n: int) -> np.ndarray:
    """Instances observed in both view ``m`` and view ``n``."""
    mask = np.asarray(mask, dtype=bool)
    _check_view(mask, m)
    _check_view(mask, n)
    if m == n:
        raise ValueError("paired_indices needs two distinct views")
    return np.flatnonzero(mask[:, m] & mask[:, n])


# -- on-disk layout -----------------------------------------------------------

def _read_meta(path: str) -> dict:
    meta = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            sep = "=" if "=" in line else ":"
            if sep not in line:
                raise DatasetError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split(sep, 1))
            meta[key.lower()] = value
    for key in ("n", "v", "k"):
        if key not in meta:
            raise DatasetError(f"{path}: missing key {key!r}")
    return meta


def _read_matrix(path: str, dtype=float) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([dtype(tok) for tok in line.split(",")])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise DatasetError(f"{path}: ragged rows (widths {sorted(widths)})")
    return np.array(rows, dtype=np.float64 if dtype is float else np.int64)


def load_dataset(root: str, mask_spec: Optional[MaskSpec] = None,
                 use_mask_file: bool = True) -> MultiViewDataset:
    """Load ``meta``, ``view_<i>.csv`` and optional ``mask.csv`` / ``labels.csv``.

    When ``mask.csv`` is absent (or ``use_mask_file`` is false) the mask is
    generated from ``mask_spec``, all-observed if that is ``None`` too.
    """
    meta = _read_meta(os.path.join(root, "meta"))
    n, v, k = int(meta["n"]), int(meta["v"]), int(meta["k"])
    dims = [int(d) for d in meta["dims"].split(",")] if "dims" in meta else None
    if dims is not None and len(dims) != v:
        raise DatasetError(f"meta lists {len(dims)} dims for {v} views")

    views = []
    for i in range(v):
        x = _read_matrix(os.path.join(root, f"view_{i}.csv"))
        if x.shape[0] != n:
            raise DatasetError(f"view_{i}.csv has {x.shape[0]} rows, meta says n={n}")
        if dims is not None and x.shape[1] != dims[i]:
            raise DatasetError(f"view_{i}.csv has {x.shape[1]} columns, meta says {dims[i]}")
        views.append(x)

    mask_path = os.path.join(root, "mask.csv")
    if use_mask_file and os.path.exists(mask_path):
        mask = read_mask(mask_path, n, v)
    else:
        mask = generate_mask(n, v, mask_spec or MaskSpec())

    labels = None
    labels_path = os.path.join(root, "labels.csv")
    if os.path.exists(labels_path):
        labels = _read_matrix(labels_path, dtype=int).reshape(-1)
        if labels.size != n:
            raise DatasetError(f"labels.csv has {labels.size} entries, expected {n}")
        if labels.min() < 0 or labels.max() >= k:
            raise DatasetError(f"labels.csv values must lie in [0, {k})")

    name = meta.get("name", os.path.basename(os.path.normpath(root)))
    return MultiViewDataset(views, mask, labels, k, name=name)


def read_mask(path: str, n: int, v: int) -> np.ndarray:
    mask = _read_matrix(path, dtype=int)
    if mask.shape != (n, v) or not np.isin(mask, (0, 1)).all():
        raise DatasetError(f"{path}: expected {n} rows of {v} 0/1 entries")
    return mask.astype(bool)


def write_mask(mask: np.ndarray, path: str) -> None:
    mask = np.asarray(mask, dtype=int)
    with open(path, "w") as fh:
        for row in mask:
            fh.write(",".join(str(x) for x in row) + "\n")


def save_dataset(dataset: MultiViewDataset, root: str, with_mask: bool = True) -> None:
    """Write a dataset in the directory layout read by :func:`load_dataset`.

    Missing rows are written as zeros; the mask file is authoritative.
    """
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "meta"), "w") as fh:
        fh.write(f"name = {dataset.name}\n")
        fh.write(f"n = {dataset.n}\nv = {dataset.n_views}\nk = {dataset.n_clusters}\n")
        fh.write("dims = " + ",".join(str(d) for d in dataset.dims) + "\n")
    for i, x in enumerate(dataset.views):
        np.savetxt(os.path.join(root, f"view_{i}.csv"), np.nan_to_num(x, nan=0.0),
                   delimiter=",", fmt="%.10g")
    if with_mask:
        write_mask(dataset.mask, os.path.join(root, "mask.csv"))
    if dataset.labels is not None:
        np.savetxt(os.path.join(root, "labels.csv"), dataset.labels, fmt="%d")


def make_blobs(
    n: int = 600,
    n_clusters: int = 3,
    dims: Sequence[int] = (10, 10),
    separation: float = 6.0,
    std: float = 1.0,
    seed: int = 0,
    mask_spec: Optional[MaskSpec] = None,
) -> MultiViewDataset:
    """Gaussian blobs seen through several views.

    In every view the cluster means are pairwise ``separation * std`` apart
    (along random orthonormal directions), with isotropic noise ``std``.
    Cluster sizes are balanced.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_clusters
    rng.shuffle(labels)
    views = []
    for d in dims:
        if d < n_clusters:
            raise ValueError("each view needs at least n_clusters dimensions")
        basis, _ = np.linalg.qr(rng.standard_normal((d, n_clusters)))
        means = basis.T * (separation * std / np.sqrt(2.0))
        offset = rng.uniform(-2.0, 2.0, size=d)
        views.append(means[labels] + offset + std * rng.standard_normal((n, d)))
    mask = generate_mask(n, len(dims), mask_spec or MaskSpec())
    return MultiViewDataset(views, mask, labels, n_clusters, name="blobs")
