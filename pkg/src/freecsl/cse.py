"""Within-view graph clustering driven by spectral modularity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy.spatial.distance import cdist

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class CseConfig:
    neighbors: int = 3
    kl_weight: float = 0.1
    t_dof: float = 1.0

    def __post_init__(self):
        if self.neighbors < 1:
            raise ValueError("neighbors must be >= 1")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")
        if self.t_dof <= 0:
            raise ValueError("t_dof must be positive")


@dataclass
class ViewGraph:
    adjacency: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.array_equal(a, a.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise ValueError("adjacency must have a zero diagonal")
        self.adjacency = a

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @property
    def edge_count(self) -> float:
        return float(self.adjacency.sum() / 2.0)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def edges(self):
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return list(zip(i.tolist(), j.tolist()))


def knn_adjacency(x: np.ndarray, neighbors: int) -> ViewGraph:
    """Symmetric kNN graph: i ~ j when either is among the other's nearest neighbors.

    Distances are Euclidean; ties go to the lower index.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if neighbors >= n:
        raise ValueError(f"neighbors={neighbors} must be smaller than the {n} observed rows")
    d = cdist(x, x)
    np.fill_diagonal(d, np.inf)
    nearest = np.argsort(d, axis=1, kind="stable")[:, :neighbors]
    a = np.zeros((n, n))
    a[np.repeat(np.arange(n), neighbors), nearest.ravel()] = 1.0
    return ViewGraph(np.maximum(a, a.T))


def modularity_matrix(graph: ViewGraph) -> np.ndarray:
    """B = A - d d^T / 2m."""
    m = graph.edge_count
    if m <= 0:
        raise ValueError("modularity is undefined for a graph without edges")
    d = graph.degrees
    return graph.adjacency - np.outer(d, d) / (2.0 * m)


def node_assign(z, graph: ViewGraph, state, view: int) -> torch.Tensor:
    """Softmax cluster assignment of graph nodes from the GCN branch."""
    adj = torch.as_tensor(graph.adjacency, dtype=state.dtype)
    return torch.softmax(state.node_logits(z, adj, view), dim=1)


def t_dist_labels(h, prototypes, t_dof: float = 1.0) -> np.ndarray:
    """Student's-t kernel similarities to prototypes, normalized per row."""
    h = np.asarray(h.detach() if torch.is_tensor(h) else h, dtype=np.float64)
    c = np.asarray(prototypes, dtype=np.float64)
    d2 = ((h[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    kernel = (1.0 + d2 / t_dof) ** (-(t_dof + 1.0) / 2.0)
    return kernel / kernel.sum(axis=1, keepdims=True)


def modularity(p, b, m: float):
    """Tr(P^T B P) / 2m for soft assignments P."""
    return (p * (b @ p)).sum() / (2.0 * m)


def kl_modularity_loss(p, b, labels, kl_weight: float, m: float) -> torch.Tensor:
    """-Tr(P^T B P)/2m + kl_weight * KL(L || P), KL summed over nodes."""
    p = p if torch.is_tensor(p) else torch.as_tensor(np.asarray(p), dtype=torch.float64)
    b = torch.as_tensor(b, dtype=p.dtype)
    lab = torch.as_tensor(labels, dtype=p.dtype)
    if not (p.shape == lab.shape and b.shape == (p.shape[0], p.shape[0])):
        raise ValueError(f"shape mismatch: P {tuple(p.shape)}, B {tuple(b.shape)}, L {tuple(lab.shape)}")
    if m <= 0:
        raise ValueError("edge count must be positive")
    kl = (lab * (torch.log(lab.clamp_min(LOG_FLOOR)) - torch.log(p.clamp_min(LOG_FLOOR)))).sum()
    return -modularity(p, b, m) + kl_weight * kl


def total_gc_loss(state, dataset, graphs: Sequence[ViewGraph], labels: Sequence, config: CseConfig,
                  latents: Sequence = None) -> torch.Tensor:
    """Sum over views of the KL-regularized modularity loss on each view's observed rows.

    ``latents[v]`` may supply precomputed latent codes for the observed rows.
    """
    total = None
    for v, graph in enumerate(graphs):
        if latents is not None:
            z = latents[v]
        else:
            z = state.encode(dataset.observed(v), v)
        p = node_assign(z, graph, state, v)
        term = kl_modularity_loss(p, modularity_matrix(graph), labels[v], config.kl_weight, graph.edge_count)
        total = term if total is None else total + term
    return total


def write_edge_list(graph: ViewGraph, path: str) -> None:
    with open(path, "w") as fh:
        for i, j in graph.edges():
            fh.write(f"{i} {j}\n")
