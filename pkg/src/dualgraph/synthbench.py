"""Seeded synthetic benchmark: clustered expression plus a block-structured PPI
network whose modules carry each cluster's signature genes."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError
from .ingest import ExpressionMatrix, LabelVector, PpiNetwork, Stage, save_expression_csv, save_labels, save_ppi


@dataclass(frozen=True)
class SynthSpec:
    n_cells: int = 400
    n_genes: int = 300
    n_clusters: int = 4
    noise: float = 1.5
    overlap: float = 0.0
    n_modules: int = 6
    signature_size: int = 30
    high_mean: float = 3.0
    low_mean: float = 1.0
    p_intra: float = 0.3
    p_inter: float = 0.01
    min_score: int = 150
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1 or self.n_clusters > self.n_cells:
            raise DomainError(f"need 1 <= n_clusters <= n_cells, got {self.n_clusters}")
        if not 0.0 <= self.overlap < 1.0:
            raise DomainError(f"overlap must lie in [0, 1), got {self.overlap}")
        for name in ("p_intra", "p_inter"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DomainError(f"{name} must be a probability")
        if self.noise < 0:
            raise DomainError("noise must be non-negative")
        if self.n_modules < self.n_clusters:
            raise DomainError("every cluster needs its own PPI module")
        if self.n_modules > self.n_genes:
            raise DomainError("more PPI modules than genes")
        if self.signature_size > self.n_genes // self.n_modules:
            raise DomainError(
                f"signature of {self.signature_size} genes does not fit in modules of "
                f"{self.n_genes // self.n_modules} genes"
            )
        if not 0 <= self.min_score <= 1000:
            raise DomainError("min_score must lie in [0, 1000]")


def module_of_genes(spec: SynthSpec) -> np.ndarray:
    """Module index per gene; contiguous blocks, the remainder spread over the first modules."""
    return np.sort(np.arange(spec.n_genes) % spec.n_modules)


def generate(spec: SynthSpec = SynthSpec()) -> tuple[ExpressionMatrix, LabelVector, PpiNetwork]:
    rng = np.random.default_rng(spec.seed)
    genes = [f"G{i:04d}" for i in range(spec.n_genes)]
    cells = [f"cell{i:04d}" for i in range(spec.n_cells)]
    module = module_of_genes(spec)

    signatures = []
    for j in range(spec.n_clusters):
        members = np.flatnonzero(module == j)
        signatures.append(rng.permutation(members)[: spec.signature_size])
    n_shared = int(round(spec.overlap * spec.signature_size))
    if n_shared and spec.n_clusters > 1:
        # cluster j swaps the tail of its signature for the head of cluster j+1's,
        # which j+1 keeps; neighbors share min(n_shared, size - n_shared) genes
        own = [s.copy() for s in signatures]
        for j in range(spec.n_clusters):
            nxt = own[(j + 1) % spec.n_clusters]
            signatures[j] = np.concatenate([own[j][: spec.signature_size - n_shared], nxt[:n_shared]])

    labels = rng.permutation(np.arange(spec.n_cells) % spec.n_clusters)
    means = np.full((spec.n_clusters, spec.n_genes), spec.low_mean)
    for j, sig in enumerate(signatures):
        means[j, sig] = spec.high_mean
    values = np.maximum(means[labels] + spec.noise * rng.standard_normal((spec.n_cells, spec.n_genes)), 0.0)

    edges = {}
    iu, ju = np.triu_indices(spec.n_genes, k=1)
    prob = np.where(module[iu] == module[ju], spec.p_intra, spec.p_inter)
    keep = rng.random(iu.size) < prob
    scores = rng.integers(spec.min_score, 1001, size=iu.size)
    for a, b, s in zip(iu[keep], ju[keep], scores[keep]):
        edges[(genes[a], genes[b])] = float(s)
    net = PpiNetwork(tuple(genes), edges, score_threshold=0)

    # relabel by first appearance so the class ids are contiguous in cell order
    first = {}
    names = [str(first.setdefault(int(l), len(first))) for l in labels]
    lv = LabelVector(np.array([int(n) for n in names]), tuple(f"type{n}" for n in names))
    return ExpressionMatrix(values, cells, genes, Stage.RAW), lv, net


def block_densities(net: PpiNetwork, spec: SynthSpec) -> tuple[float, float]:
    """Empirical (intra-module, inter-module) edge densities."""
    module = dict(zip((f"G{i:04d}" for i in range(spec.n_genes)), module_of_genes(spec)))
    sizes = np.bincount(module_of_genes(spec))
    intra_pairs = float((sizes * (sizes - 1) / 2).sum())
    inter_pairs = spec.n_genes * (spec.n_genes - 1) / 2 - intra_pairs
    intra = sum(1 for a, b in net.edges if module[a] == module[b])
    inter = len(net.edges) - intra
    return intra / max(intra_pairs, 1.0), inter / max(inter_pairs, 1.0)


def write(spec: SynthSpec, out_dir) -> dict[str, Path]:
    """Write ``expression.csv``, ``labels.csv``, ``ppi.tsv`` and ``spec.json`` under ``out_dir``."""
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x, labels, net = generate(spec)
    paths = {
        "expression": out / "expression.csv",
        "labels": out / "labels.csv",
        "ppi": out / "ppi.tsv",
        "spec": out / "spec.json",
    }
    save_expression_csv(x, paths["expression"])
    save_labels(x.cell_ids, labels, paths["labels"])
    save_ppi(net, paths["ppi"])
    paths["spec"].write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
