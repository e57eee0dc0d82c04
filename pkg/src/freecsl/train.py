"""Two-stage training: reconstruction warm-up, then joint fine-tuning.

Fine-tuning refreshes the epoch-level targets (consensus prototypes,
per-view prototypes and Student's-t labels) from the current encoders at
the start of every epoch and holds them fixed while the mini-batches run.
The graph loss is a whole-graph quantity, so it is evaluated once per epoch
and its gradient rides along with the first mini-batch.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .csl import CslConfig, cc_loss
from .cse import CseConfig, ViewGraph, knn_adjacency, t_dist_labels, total_gc_loss
from .data import MultiViewDataset
from .fusion import (
    PrototypeSet,
    completeness_weights,
    consensus_prototypes,
    fuse,
    kmeans,
    per_view_prototypes,
    scatter_rows,
)
from .nets import Architecture, ModelState, init_params


class TrainingDiverged(FloatingPointError):
    def __init__(self, component: str, reports: list):
        super().__init__(f"non-finite {component} loss")
        self.component = component
        self.reports = reports


@dataclass
class TrainConfig:
    warmup_epochs: int = 100
    finetune_epochs: int = 100
    batch_size: int = 512
    lr_warmup: float = 3e-4
    lr_finetune: float = 5e-4
    seed: int = 0
    csl: CslConfig = field(default_factory=CslConfig)
    cse: CseConfig = field(default_factory=CseConfig)
    use_cc: bool = True
    use_gc: bool = True
    latent_dim: int = 64
    hidden: tuple = (500, 500, 2000)
    gcn_dims: tuple = (128, 64)
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr_warmup <= 0 or self.lr_finetune <= 0:
            raise ValueError("learning rates must be positive")
        if self.warmup_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def architecture(self, dataset: MultiViewDataset) -> Architecture:
        return Architecture(tuple(dataset.dims), dataset.n_clusters, latent_dim=self.latent_dim,
                            hidden=tuple(self.hidden), head_dim=self.latent_dim,
                            gcn_dims=tuple(self.gcn_dims))

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)


@dataclass
class EpochReport:
    stage: str
    epoch: int
    rec: float
    cc: float = 0.0
    gc: float = 0.0
    total: float = 0.0
    seconds: float = 0.0
    metrics: Optional[dict] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    rec: float
    cc: float
    gc: float


# -- losses -------------------------------------------------------------------

def _batch_rows(dataset, batch, v):
    batch = np.asarray(batch)
    return batch[dataset.mask[batch, v]]


def reconstruction_loss(state: ModelState, dataset: MultiViewDataset, batch) -> torch.Tensor:
    """Summed squared reconstruction error over the observed rows in ``batch``."""
    total = None
    for v in range(dataset.n_views):
        rows = _batch_rows(dataset, batch, v)
        x = state.as_tensor(dataset.views[v][rows])
        term = ((x - state.decode(state.encode(x, v), v)) ** 2).sum()
        total = term if total is None else total + term
    return total


def overall_loss(
    state: ModelState,
    dataset: MultiViewDataset,
    batch,
    prototypes: Optional[PrototypeSet],
    graphs: Optional[List[ViewGraph]],
    labels: Optional[list],
    config: TrainConfig,
    include_gc: bool = True,
) -> LossBreakdown:
    """Unweighted sum of the enabled loss terms on one mini-batch.

    Disabled terms are still evaluated (without gradient) so reports show
    their values.  The graph term is only evaluated when ``include_gc``.
    """
    batch = np.sort(np.asarray(batch))
    rec = None
    semantic = []
    for v in range(dataset.n_views):
        rows = _batch_rows(dataset, batch, v)
        x = state.as_tensor(dataset.views[v][rows])
        z = state.encode(x, v)
        term = ((x - state.decode(z, v)) ** 2).sum()
        rec = term if rec is None else rec + term
        semantic.append((rows, z))
    total = rec
    cc_val = gc_val = 0.0

    if prototypes is not None:
        with torch.set_grad_enabled(config.use_cc and torch.is_grad_enabled()):
            sem = [(rows, state.contrastive_head(z)) for rows, z in semantic]
            cc = cc_loss(sem, prototypes.prototypes, config.csl)
        cc_val = float(cc.detach())
        if config.use_cc:
            total = total + cc

    if include_gc and graphs is not None:
        with torch.set_grad_enabled(config.use_gc and torch.is_grad_enabled()):
            gc = total_gc_loss(state, dataset, graphs, labels, config.cse)
        gc_val = float(gc.detach())
        if config.use_gc:
            total = total + gc

    return LossBreakdown(total, float(rec.detach()), cc_val, gc_val)


# -- helpers ------------------------------------------------------------------

def _batches(n: int, size: int, rng: np.random.Generator) -> list:
    order = rng.permutation(n)
    return [np.sort(order[i:i + size]) for i in range(0, n, size)]


@torch.no_grad()
def view_codes(state: ModelState, dataset: MultiViewDataset, semantic: bool = True):
    """Per-view latent (or semantic) codes of the observed rows, as float64 arrays."""
    out = []
    for v in range(dataset.n_views):
        z = state.encode(dataset.observed(v), v)
        if semantic:
            z = state.contrastive_head(z)
        out.append(z.double().numpy())
    return out


def consensus(state: ModelState, dataset: MultiViewDataset, semantic: bool = True) -> np.ndarray:
    """Completeness-weighted consensus codes for all N instances."""
    full = scatter_rows(view_codes(state, dataset, semantic), dataset.mask)
    return fuse(full, completeness_weights(dataset.mask))


def build_graphs(dataset: MultiViewDataset, neighbors: int) -> List[ViewGraph]:
    return [knn_adjacency(dataset.observed(v), neighbors) for v in range(dataset.n_views)]


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _check(value: float, component: str, reports: list) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(component, reports)


# -- stages -------------------------------------------------------------------

def warmup(state: ModelState, dataset: MultiViewDataset, config: TrainConfig,
           on_epoch: Optional[Callable] = None, optimizer: Optional[torch.optim.Optimizer] = None):
    """Reconstruction-only pre-training of the autoencoders.

    Returns ``(state, reports)``; ``state`` is updated in place.  Pass your
    own ``optimizer`` to keep its moment estimates for :func:`finetune`.
    """
    reports: List[EpochReport] = []
    if config.warmup_epochs == 0:
        return state, reports
    rng = np.random.default_rng([config.seed, 1])
    opt = optimizer or warmup_optimizer(state, config)
    for epoch in range(config.warmup_epochs):
        t0 = time.perf_counter()
        rec_sum = 0.0
        for batch in _batches(dataset.n, config.batch_size, rng):
            loss = reconstruction_loss(state, dataset, batch)
            value = float(loss.detach())
            _check(value, "reconstruction", reports)
            opt.zero_grad()
            loss.backward()
            opt.step()
            rec_sum += value
        report = EpochReport("warmup", epoch, rec_sum, total=rec_sum, seconds=time.perf_counter() - t0)
        reports.append(report)
        if on_epoch:
            on_epoch(report, state)
    return state, reports


def warmup_optimizer(state: ModelState, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(list(state.autoencoder_parameters()), lr=config.lr_warmup)


@torch.no_grad()
def epoch_targets(state: ModelState, dataset: MultiViewDataset, config: TrainConfig, epoch: int):
    """Consensus prototypes and per-view Student's-t labels for one epoch.

    The consensus prototypes are k-means centroids of the fused semantic codes
    of the instances observed in every view (all instances when fewer than K
    are complete).  Codes of one-view instances sit wherever their own
    encoder puts them, and before the views are aligned k-means would split
    those by view rather than by cluster.
    """
    seed = _epoch_seed(config.seed, epoch)
    semantic = view_codes(state, dataset, semantic=True)
    fused = fuse(scatter_rows(semantic, dataset.mask), completeness_weights(dataset.mask))
    complete = dataset.mask.all(axis=1)
    if complete.sum() >= dataset.n_clusters:
        fused = fused[complete]
    protos = consensus_prototypes(fused, dataset.n_clusters, seed=seed)
    protos.per_view = per_view_prototypes(semantic, dataset.n_clusters, seed=seed + 1)
    labels = [t_dist_labels(h, c, config.cse.t_dof) for h, c in zip(semantic, protos.per_view)]
    return protos, labels


def finetune(state: ModelState, dataset: MultiViewDataset, config: TrainConfig,
             graphs: Optional[List[ViewGraph]] = None, on_epoch: Optional[Callable] = None,
             warm_optimizer: Optional[torch.optim.Optimizer] = None):
    """Joint optimization of reconstruction, contrastive and graph clustering losses.

    Returns ``(state, reports)``; ``state`` is updated in place.  Moment
    estimates held by ``warm_optimizer`` seed the fine-tuning optimizer, so
    the first steps do not scramble the warmed-up autoencoders.
    """
    reports: List[EpochReport] = []
    if config.finetune_epochs == 0:
        return state, reports
    if graphs is None:
        graphs = build_graphs(dataset, config.cse.neighbors)
    rng = np.random.default_rng([config.seed, 2])
    opt = torch.optim.Adam(state.parameters(), lr=config.lr_finetune)
    if warm_optimizer is not None:
        for p in state.parameters():
            if p in warm_optimizer.state:
                opt.state[p] = copy.deepcopy(warm_optimizer.state[p])
    for epoch in range(config.finetune_epochs):
        t0 = time.perf_counter()
        protos, labels = epoch_targets(state, dataset, config, epoch)
        rec = cc = gc = 0.0
        for i, batch in enumerate(_batches(dataset.n, config.batch_size, rng)):
            parts = overall_loss(state, dataset, batch, protos, graphs, labels, config,
                                 include_gc=(i == 0))
            for name, value in (("reconstruction", parts.rec), ("contrastive", parts.cc),
                                ("graph", parts.gc)):
                _check(value, name, reports)
            opt.zero_grad()
            parts.total.backward()
            opt.step()
            rec, cc, gc = rec + parts.rec, cc + parts.cc, gc + parts.gc
        total = rec + cc * config.use_cc + gc * config.use_gc
        report = EpochReport("finetune", epoch, rec, cc, gc, total, time.perf_counter() - t0)
        reports.append(report)
        if on_epoch:
            on_epoch(report, state)
    return state, reports


def fit(dataset: MultiViewDataset, config: TrainConfig, on_epoch: Optional[Callable] = None):
    """Initialize, warm up and fine-tune.  Returns ``(state, reports)``."""
    state = init_params(config.architecture(dataset), seed=config.seed, dtype=config.torch_dtype)
    opt = warmup_optimizer(state, config)
    state, warm = warmup(state, dataset, config, on_epoch, optimizer=opt)
    state, fine = finetune(state, dataset, config, on_epoch=on_epoch, warm_optimizer=opt)
    return state, warm + fine


def predict(state: ModelState, dataset: MultiViewDataset, k: Optional[int] = None, seed: int = 0) -> np.ndarray:
    """k-means on the consensus semantic codes of all N instances."""
    k = k or dataset.n_clusters
    return kmeans(consensus(state, dataset, semantic=True), k, seed=seed)[1]


# -- imputation baselines -----------------------------------------------------

def impute_views(full: List[np.ndarray], mask: np.ndarray, neighbors: int) -> List[np.ndarray]:
    """Fill missing rows by transferring kNN sets across views.

    For an instance missing in target view t but observed in source view s,
    its ``neighbors`` nearest instances in s (among those observed in both s
    and t) are located and their rows in t are averaged.  Estimates from
    several source views are averaged.
    """
    mask = np.asarray(mask, dtype=bool)
    n_views = len(full)
    out = [x.copy() for x in full]
    for t in range(n_views):
        missing = ~mask[:, t]
        if not missing.any():
            continue
        acc = np.zeros((mask.shape[0], full[t].shape[1]))
        hits = np.zeros(mask.shape[0])
        for s in range(n_views):
            if s == t:
                continue
            queries = np.flatnonzero(missing & mask[:, s])
            pool = np.flatnonzero(mask[:, s] & mask[:, t])
            if queries.size == 0 or pool.size == 0:
                continue
            kk = min(neighbors, pool.size)
            d = cdist(full[s][queries], full[s][pool])
            nearest = pool[np.argsort(d, axis=1, kind="stable")[:, :kk]]
            acc[queries] += full[t][nearest].mean(axis=1)
            hits[queries] += 1
        filled = np.flatnonzero(missing & (hits > 0))
        out[t][filled] = acc[filled] / hits[filled, None]
        left = np.flatnonzero(missing & (hits == 0))
        if left.size:
            out[t][left] = full[t][mask[:, t]].mean(axis=0)
    return out


def impute_baseline(state: ModelState, dataset: MultiViewDataset, mode: str, neighbors: int = 3,
                    k: Optional[int] = None, seed: int = 0) -> np.ndarray:
    """Imputation comparison: fill latent ("ILR") or semantic ("ISR") rows, sum views, k-means."""
    mode = mode.upper()
    if mode not in ("ILR", "ISR"):
        raise ValueError(f"mode must be ILR or ISR, got {mode!r}")
    codes = view_codes(state, dataset, semantic=(mode == "ISR"))
    full = impute_views(scatter_rows(codes, dataset.mask), dataset.mask, neighbors)
    return kmeans(np.sum(full, axis=0), k or dataset.n_clusters, seed=seed)[1]


def paired_semantics(state: ModelState, dataset: MultiViewDataset, m: int = 0, n: int = 1):
    """Semantic codes of the instances observed in both views ``m`` and ``n``."""
    codes = view_codes(state, dataset, semantic=True)
    full = scatter_rows(codes, dataset.mask)
    both = np.flatnonzero(dataset.mask[:, m] & dataset.mask[:, n])
    return full[m][both], full[n][both]
