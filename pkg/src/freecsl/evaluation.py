"""Clustering metrics, the semantic-consensus check and similarity diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image
from scipy.optimize import linear_sum_assignment
from sklearn import metrics as skm


@dataclass(frozen=True)
class MetricReport:
    acc: float
    nmi: float
    ari: float
    n: int
    k: int

    def as_row(self) -> dict:
        return {"acc": self.acc, "nmi": self.nmi, "ari": self.ari}


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    return pred, truth


def clustering_accuracy(pred, truth, k: Optional[int] = None) -> float:
    """Best one-to-one matching of predicted clusters to classes (Hungarian)."""
    pred, truth = _pair(pred, truth)
    if pred.size == 0:
        return 0.0
    size = max(k or 0, int(pred.max()) + 1, int(truth.max()) + 1)
    table = np.zeros((size, size), dtype=np.int64)
    np.add.at(table, (pred, truth), 1)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / pred.size)


def nmi(pred, truth) -> float:
    """Mutual information over the arithmetic mean of the two entropies.

    Zero when either labelling has a single cluster.
    """
    pred, truth = _pair(pred, truth)
    if np.unique(pred).size < 2 or np.unique(truth).size < 2:
        return 0.0
    return float(skm.normalized_mutual_info_score(truth, pred, average_method="arithmetic"))


def ari(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(skm.adjusted_rand_score(truth, pred))


def evaluate(pred, truth, k: int) -> MetricReport:
    pred, truth = _pair(pred, truth)
    return MetricReport(clustering_accuracy(pred, truth, k), nmi(pred, truth), ari(pred, truth),
                        n=pred.size, k=k)


def semantic_consensus(h_a, h_b, prototypes) -> bool:
    """True when both codes score highest on the same prototype (lowest index wins ties)."""
    c = np.asarray(prototypes, dtype=np.float64)
    return int(np.argmax(c @ np.asarray(h_a, dtype=np.float64))) == int(
        np.argmax(c @ np.asarray(h_b, dtype=np.float64)))


def consensus_rate(h_a: np.ndarray, h_b: np.ndarray, prototypes) -> float:
    """Fraction of row pairs (h_a[i], h_b[i]) satisfying :func:`semantic_consensus`."""
    c = np.asarray(prototypes, dtype=np.float64)
    if len(h_a) == 0:
        return float("nan")
    agree = np.argmax(np.asarray(h_a) @ c.T, axis=1) == np.argmax(np.asarray(h_b) @ c.T, axis=1)
    return float(agree.mean())


def similarity_matrix(h: np.ndarray, order_by=None) -> np.ndarray:
    """Pairwise cosine similarities, rows and columns sorted by ``order_by`` (stable)."""
    h = np.asarray(h, dtype=np.float64)
    if order_by is not None:
        h = h[np.argsort(np.asarray(order_by), kind="stable")]
    norm = np.linalg.norm(h, axis=1, keepdims=True)
    unit = h / np.where(norm > 0, norm, 1.0)
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = (sim + sim.T) / 2.0
    np.fill_diagonal(sim, np.where(norm[:, 0] > 0, 1.0, 0.0))
    return sim


def save_similarity(sim: np.ndarray, stem: str) -> tuple:
    """Write ``<stem>.csv`` (raw matrix) and ``<stem>.pgm`` (grayscale, white = 1, black = -1)."""
    csv_path, img_path = stem + ".csv", stem + ".pgm"
    np.savetxt(csv_path, sim, delimiter=",", fmt="%.6f")
    pixels = np.round((np.clip(sim, -1, 1) + 1.0) * 127.5).astype(np.uint8)
    Image.fromarray(pixels).save(img_path)
    return csv_path, img_path
