"""Cell-to-cell KNN graph built from Pearson similarity between cells."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .ingest import ExpressionMatrix, Stage


@dataclass(frozen=True)
class CellGraph:
    adjacency: np.ndarray  # bool, symmetric, full diagonal
    k: int

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edges ``(i, j)`` with ``i < j``, self-loops omitted."""
        i, j = np.nonzero(np.triu(self.adjacency, k=1))
        return list(zip(i.tolist(), j.tolist()))


def pearson_similarity(x: ExpressionMatrix | np.ndarray, cell_ids=None) -> np.ndarray:
    if isinstance(x, ExpressionMatrix):
        if x.stage != Stage.HVG_SELECTED:
            raise DomainError(f"pearson_similarity expects stage hvg_selected, got {x.stage.name.lower()}")
        cell_ids = x.cell_ids
        values = x.values
    else:
        values = np.asarray(x, dtype=np.float64)
    centered = values - values.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=1))
    flat = np.flatnonzero(norms <= 1e-12 * max(1.0, float(np.abs(values).max(initial=0.0))))
    if flat.size:
        name = cell_ids[flat[0]] if cell_ids is not None else int(flat[0])
        raise DomainError(f"cell {name!r} has zero variance; correlation undefined")
    u = centered / norms[:, None]
    s = u @ u.T
    s = np.clip((s + s.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(s, 1.0)
    return s


def knn_graph(s: np.ndarray, k: int = 15) -> CellGraph:
    """Link each cell to its ``k`` most similar others, symmetrize by union, add self-loops.

    Ties in similarity go to the lower cell index.
    """
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[0]
    if k < 1:
        raise DomainError(f"k must be positive, got {k}")
    if k >= n:
        raise DomainError(f"k={k} must be smaller than the number of cells ({n})")
    adj = np.zeros((n, n), dtype=bool)
    for i in range(n):
        row = -s[i].copy()
        row[i] = np.inf
        nbrs = np.argsort(row, kind="stable")[:k]
        adj[i, nbrs] = True
    adj |= adj.T
    np.fill_diagonal(adj, True)
    adj.flags.writeable = False
    return CellGraph(adj, k)


def save_edge_list(graph: CellGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("i,j\n")
        for i, j in graph.edges():
            fh.write(f"{i},{j}\n")


def load_edge_list(path, n: int, k: int = 0) -> CellGraph:
    adj = np.zeros((n, n), dtype=bool)
    with open(path, encoding="utf-8") as fh:
        next(fh, None)
        for ln in fh:
            if ln.strip():
                i, j = (int(t) for t in ln.split(","))
                adj[i, j] = adj[j, i] = True
    np.fill_diagonal(adj, True)
    adj.flags.writeable = False
    return CellGraph(adj, k)
