"""Gene-to-gene graph: node2vec walks on the PPI network, skip-gram
embeddings, and projection of gene vectors into per-cell features."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, ParseError
from .ingest import ExpressionMatrix, PpiNetwork, Stage

log = logging.getLogger(__name__)

EXACT_SOFTMAX_MAX_NODES = 2000


@dataclass(frozen=True)
class WalkParams:
    p: float = 1.0
    q: float = 1.0
    walks_per_node: int = 10
    walk_length: int = 80
    seed: int = 0

    def __post_init__(self):
        if self.p <= 0 or self.q <= 0:
            raise DomainError(f"p and q must be positive, got p={self.p}, q={self.q}")
        if self.walks_per_node < 1:
            raise DomainError("walks_per_node must be >= 1")
        if self.walk_length < 2:
            raise DomainError("walk_length must be >= 2")


@dataclass
class WalkCorpus:
    sequences: list[list[int]]
    nodes: tuple[str, ...]
    skipped: list[str] = field(default_factory=list)

    def as_symbols(self) -> list[list[str]]:
        return [[self.nodes[i] for i in seq] for seq in self.sequences]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for seq in self.as_symbols():
                fh.write(" ".join(seq) + "\n")


@dataclass
class GeneEmbeddings:
    vectors: np.ndarray
    genes: tuple[str, ...]
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.genes = tuple(self.genes)
        if self.vectors.shape[0] != len(self.genes):
            raise DomainError("one embedding row per gene is required")
        if not np.all(np.isfinite(self.vectors)):
            raise DomainError("gene embeddings contain non-finite values")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def aligned(self, symbols: Sequence[str]) -> np.ndarray:
        """Rows for ``symbols`` in order; genes without an embedding get zeros."""
        idx = {g: i for i, g in enumerate(self.genes)}
        out = np.zeros((len(symbols), self.dim))
        for r, g in enumerate(symbols):
            if g in idx:
                out[r] = self.vectors[idx[g]]
        return out

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["gene_symbol", *(f"v{i + 1}" for i in range(self.dim))])
            for g, row in zip(self.genes, self.vectors):
                w.writerow([g, *(repr(float(v)) for v in row)])

    @classmethod
    def load(cls, path) -> GeneEmbeddings:
        genes, rows = [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "gene_symbol":
                raise ParseError("expected header starting with 'gene_symbol'", path, 1)
            for row in reader:
                if not row:
                    continue
                if len(row) != len(header):
                    raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, reader.line_num)
                genes.append(row[0])
                try:
                    rows.append([float(v) for v in row[1:]])
                except ValueError:
                    raise ParseError("non-numeric embedding value", path, reader.line_num) from None
        return cls(np.array(rows).reshape(len(genes), len(header) - 1), genes)


def _transition_probs(nbrs: list[int], prev: int, prev_nbrs: frozenset, p: float, q: float) -> np.ndarray:
    w = np.empty(len(nbrs))
    for i, x in enumerate(nbrs):
        if x == prev:
            w[i] = 1.0 / p
        elif x in prev_nbrs:
            w[i] = 1.0
        else:
            w[i] = 1.0 / q
    return w / w.sum()


def transition_weights(net: PpiNetwork, prev: str, cur: str, p: float = 1.0, q: float = 1.0) -> dict[str, float]:
    """Second-order transition distribution from ``cur`` given the walk came from ``prev``.

    Unnormalized weights are ``1/p`` for returning to ``prev``, ``1`` for
    neighbors shared with ``prev`` and ``1/q`` for everything further away.
    """
    i_prev, i_cur = net.index[prev], net.index[cur]
    nbrs = net.adjacency[i_cur]
    if not nbrs:
        raise DomainError(f"node {cur!r} has no neighbors")
    if i_prev not in net.neighbor_sets[i_cur]:
        raise DomainError(f"{prev!r} is not adjacent to {cur!r}")
    probs = _transition_probs(nbrs, i_prev, net.neighbor_sets[i_prev], p, q)
    return {net.nodes[j]: float(pr) for j, pr in zip(nbrs, probs)}


def _walk(net: PpiNetwork, start: int, params: WalkParams, rng: np.random.Generator) -> list[int]:
    adj = net.adjacency
    sets = net.neighbor_sets
    uniform = params.p == 1.0 and params.q == 1.0
    walk = [start]
    nbrs = adj[start]
    walk.append(nbrs[int(rng.random() * len(nbrs))])
    while len(walk) < params.walk_length:
        cur, prev = walk[-1], walk[-2]
        nbrs = adj[cur]
        if not nbrs:
            break
        if uniform:
            nxt = nbrs[int(rng.random() * len(nbrs))]
        else:
            cdf = np.cumsum(_transition_probs(nbrs, prev, sets[prev], params.p, params.q))
            k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            nxt = nbrs[min(k, len(nbrs) - 1)]
        walk.append(nxt)
    return walk


def random_walks(net: PpiNetwork, params: WalkParams) -> WalkCorpus:
    """``walks_per_node`` biased walks from every non-isolated node.

    Each walk draws from its own generator seeded by ``(seed, walk index,
    node index)`` so the corpus does not depend on execution order.
    """
    if not net.nodes:
        raise DomainError("PPI network has no nodes")
    starts = [i for i, n in enumerate(net.adjacency) if n]
    skipped = [net.nodes[i] for i, n in enumerate(net.adjacency) if not n]
    if skipped:
        log.info("skipping %d isolated PPI nodes", len(skipped))
    seqs = []
    for r in range(params.walks_per_node):
        for i in starts:
            rng = np.random.default_rng([params.seed, r, i])
            seqs.append(_walk(net, i, params, rng))
    return WalkCorpus(seqs, net.nodes, skipped)


def softmax_probability(vectors: np.ndarray, u: int, j: int) -> float:
    """P(j | u) under a full softmax over inner products with ``vectors[u]``."""
    scores = vectors @ vectors[u]
    scores = scores - scores.max()
    e = np.exp(scores)
    return float(e[j] / e.sum())


def context_pair_counts(corpus: WalkCorpus, window: int) -> np.ndarray:
    """``C[u, j]`` = number of times ``j`` occurs within ``window`` of ``u``."""
    n = len(corpus.nodes)
    counts = np.zeros((n, n))
    for seq in corpus.sequences:
        seq = np.asarray(seq)
        for off in range(1, window + 1):
            if off >= len(seq):
                break
            np.add.at(counts, (seq[:-off], seq[off:]), 1.0)
            np.add.at(counts, (seq[off:], seq[:-off]), 1.0)
    return counts


def exact_softmax_loss(vectors: np.ndarray, counts: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the observed pairs and its gradient.

    Embeddings are shared between center and context, so with ``S = V V^T``
    and ``G = dL/dS`` the gradient is ``(G + G^T) V``.
    """
    total = counts.sum()
    s = vectors @ vectors.T
    m = s.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(s - m).sum(axis=1))
    row = counts.sum(axis=1)
    loss = float((row @ lse - (counts * s).sum()) / total)
    probs = np.exp(s - lse[:, None])
    g = (row[:, None] * probs - counts) / total
    return loss, (g + g.T) @ vectors


def _noise_table(weights: np.ndarray, size: int = 1_000_000) -> np.ndarray:
    """Node ids laid out so a uniform index draws node ``i`` with probability ~ weights[i]."""
    bounds = np.round(np.cumsum(weights / weights.sum()) * size).astype(np.int64)
    counts = np.diff(np.concatenate([[0], bounds]))
    return np.repeat(np.arange(len(weights), dtype=np.int64), counts)


def train_skipgram(
    corpus: WalkCorpus,
    dim: int = 128,
    window: int = 10,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.025,
    seed: int = 0,
    exact_softmax: bool = False,
) -> GeneEmbeddings:
    """Skip-gram embeddings for every corpus node.

    By default trains with negative sampling (unigram^0.75 noise). With
    ``exact_softmax`` it runs full-batch gradient descent on the exact
    softmax likelihood instead; ``losses`` then holds the loss before
    training followed by the loss after every epoch. Isolated nodes get zero
    vectors.
    """
    if dim <= 0:
        raise DomainError(f"embedding dimension must be positive, got {dim}")
    if window < 1 or epochs < 1:
        raise DomainError("window and epochs must be positive")
    if not corpus.sequences:
        raise DomainError("walk corpus is empty")
    n = len(corpus.nodes)
    rng = np.random.default_rng(seed)
    syn0 = (rng.random((n, dim)) - 0.5) / dim
    present = np.zeros(n, dtype=bool)
    for seq in corpus.sequences:
        present[seq] = True

    if exact_softmax:
        if n > EXACT_SOFTMAX_MAX_NODES:
            raise DomainError(f"exact softmax is limited to {EXACT_SOFTMAX_MAX_NODES} nodes, got {n}")
        counts = context_pair_counts(corpus, window)
        losses = []
        for _ in range(epochs):
            loss, grad = exact_softmax_loss(syn0, counts)
            losses.append(loss)
            syn0 -= lr * grad
        losses.append(exact_softmax_loss(syn0, counts)[0])
    else:
        from ._sgns import sgns_train

        tokens = np.concatenate([np.asarray(s, dtype=np.int64) for s in corpus.sequences])
        offsets = np.zeros(len(corpus.sequences) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(s) for s in corpus.sequences])
        freq = np.bincount(tokens, minlength=n).astype(np.float64) ** 0.75
        noise_table = _noise_table(freq)
        syn1 = np.zeros((n, dim))
        losses = sgns_train(tokens, offsets, syn0, syn1, noise_table, window, negatives, epochs, lr,
                            int(rng.integers(2**31 - 1))).tolist()
    syn0[~present] = 0.0
    if not np.all(np.isfinite(syn0)):
        raise DomainError("skip-gram training diverged")
    return GeneEmbeddings(syn0, corpus.nodes, losses)


def embed_network(
    net: PpiNetwork,
    walk: WalkParams = WalkParams(),
    dim: int = 128,
    window: int = 10,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.025,
) -> GeneEmbeddings:
    corpus = random_walks(net, walk)
    if not corpus.sequences:
        log.warning("PPI network has no edges; all gene embeddings are zero")
        return GeneEmbeddings(np.zeros((len(net.nodes), dim)), net.nodes)
    return train_skipgram(corpus, dim, window, negatives, epochs, lr, seed=walk.seed)


def project_to_cells(x: ExpressionMatrix, e: GeneEmbeddings) -> np.ndarray:
    """Expression-weighted average of gene vectors for every cell.

    Only genes with a nonzero embedding carry weight; a cell expressing none
    of them gets a zero row.
    """
    if x.stage != Stage.HVG_SELECTED:
        raise DomainError(f"project_to_cells expects stage hvg_selected, got {x.stage.name.lower()}")
    vecs = e.aligned(x.gene_symbols)
    mask = np.any(vecs != 0.0, axis=1)
    w = x.values * mask[None, :]
    denom = w.sum(axis=1, keepdims=True)
    out = np.zeros((x.n_cells, e.dim))
    nz = denom[:, 0] > 0
    out[nz] = (w[nz] @ vecs) / denom[nz]
    return out
