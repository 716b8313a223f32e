"""Clustering evaluation: ARI, NMI and silhouette."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DomainError


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray  # classes x clusters

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def _labels(v) -> np.ndarray:
    return np.asarray(getattr(v, "labels", v)).ravel()


def contingency(truth, pred) -> ContingencyTable:
    t, p = _labels(truth), _labels(pred)
    if t.shape != p.shape:
        raise DomainError(f"label vectors differ in length: {t.size} vs {p.size}")
    _, ti = np.unique(t, return_inverse=True)
    _, pi = np.unique(p, return_inverse=True)
    counts = np.zeros((ti.max(initial=-1) + 1, pi.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(counts, (ti, pi), 1)
    return ContingencyTable(counts)


def _comb2(counts) -> int:
    return sum(int(c) * (int(c) - 1) // 2 for c in np.asarray(counts).ravel())


def ari(truth, pred) -> float:
    """Adjusted Rand index, evaluated as an exact ratio of integers."""
    table = contingency(truth, pred)
    if table.n < 2:
        raise DomainError("ARI needs at least two items")
    pairs = table.n * (table.n - 1) // 2
    index = _comb2(table.counts)
    sum_a = _comb2(table.row_sums)
    sum_b = _comb2(table.col_sums)
    # (index - E) / (max - E) with E = sum_a * sum_b / pairs, scaled by 2 * pairs
    num = 2 * (index * pairs - sum_a * sum_b)
    den = (sum_a + sum_b) * pairs - 2 * sum_a * sum_b
    if den == 0:
        # only reachable when both partitions are all-one-cluster or all-singletons
        return 1.0
    return num / den


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(truth, pred) -> float:
    """``2 MI / (H(U) + H(V))`` with natural logs; 0 when both entropies vanish."""
    table = contingency(truth, pred)
    n = table.n
    if n == 0:
        raise DomainError("NMI needs at least one item")
    h_u = _entropy(table.row_sums, n)
    h_v = _entropy(table.col_sums, n)
    if h_u + h_v == 0:
        return 0.0
    nz = table.counts > 0
    pij = table.counts[nz] / n
    outer = np.outer(table.row_sums, table.col_sums)[nz] / (n * n)
    mi = float((pij * np.log(pij / outer)).sum())
    return min(1.0, max(0.0, 2.0 * mi / (h_u + h_v)))


def silhouette_samples(points, labels) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    lab = _labels(labels)
    if x.shape[0] != lab.size:
        raise DomainError(f"{x.shape[0]} points but {lab.size} labels")
    classes, idx = np.unique(lab, return_inverse=True)
    if len(classes) < 2:
        raise DomainError("silhouette needs at least two clusters")
    d = cdist(x, x)
    onehot = np.zeros((lab.size, len(classes)))
    onehot[np.arange(lab.size), idx] = 1.0
    sizes = onehot.sum(axis=0)
    sums = d @ onehot  # n x k: total distance to each cluster
    own = sizes[idx]
    a = np.where(own > 1, sums[np.arange(lab.size), idx] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / sizes[None, :]
    mean_other[np.arange(lab.size), idx] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.where(own > 1, s, 0.0)


def silhouette(points, labels) -> float:
    """Mean silhouette with Euclidean distances; singleton clusters score 0."""
    return float(silhouette_samples(points, labels).mean())
