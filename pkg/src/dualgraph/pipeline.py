"""End-to-end wiring: raw files -> graphs -> gene context -> model -> result bundle."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import tensorcore as tc
from .cellgraph import CellGraph, knn_graph, pearson_similarity
from .config import RunConfig
from .errors import ConfigError
from .genegraph import GeneEmbeddings, embed_network, project_to_cells
from .ingest import ExpressionMatrix, LabelVector, PpiNetwork, load_expression, load_labels, load_ppi, preprocess
from .metrics import ari, nmi
from .model import ClusterResult, ModelInputs, fit

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class Prepared:
    raw: ExpressionMatrix
    x: ExpressionMatrix  # QC-filtered, normalized, HVG-selected
    labels: LabelVector | None  # aligned to x.cell_ids
    graph: CellGraph
    genes: GeneEmbeddings | None
    gene_context: np.ndarray

    @property
    def cells_dropped(self) -> int:
        return self.raw.n_cells - self.x.n_cells


def setup_threads(n: int) -> None:
    torch.set_num_threads(max(1, int(n)))


def require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if getattr(cfg, name) is None:
            raise ConfigError(f"missing required setting {name!r}")


def load_and_preprocess(cfg: RunConfig) -> tuple[ExpressionMatrix, ExpressionMatrix]:
    require(cfg, "expression")
    raw = load_expression(cfg.expression, cfg.expression_format)
    return raw, preprocess(raw, cfg.n_hvg, cfg.scale)


def gene_embeddings(cfg: RunConfig, net: PpiNetwork | None = None) -> GeneEmbeddings:
    if net is None:
        require(cfg, "ppi")
        net = load_ppi(cfg.ppi, cfg.ppi_threshold)
    return embed_network(net, cfg.walk_params(), cfg.embedding_dim, cfg.window, cfg.negatives,
                         cfg.sg_epochs, cfg.sg_lr)


def prepare(cfg: RunConfig, with_genes: bool = True) -> Prepared:
    """Everything the model needs. ``with_genes=False`` skips the PPI embedding
    (the gene context is then all zeros; used by the ``no_genemap`` ablation)."""
    raw, x = load_and_preprocess(cfg)
    labels = None
    if cfg.labels is not None:
        labels = load_labels(cfg.labels, x.cell_ids, allow_extra=True)
    graph = knn_graph(pearson_similarity(x), cfg.k)
    genes = gene_embeddings(cfg) if with_genes else None
    ctx = project_to_cells(x, genes) if genes is not None else np.zeros((x.n_cells, cfg.embedding_dim))
    return Prepared(raw, x, labels, graph, genes, ctx)


def run_model(prep: Prepared, cfg: RunConfig, **overrides) -> ClusterResult:
    mc = cfg.model_config(**overrides)
    if mc.n_clusters > prep.x.n_cells:
        raise ConfigError(f"n_clusters={mc.n_clusters} exceeds the {prep.x.n_cells} cells left after QC")
    data = ModelInputs.build(prep.x, prep.gene_context, prep.graph)
    res = fit(data, mc)
    res.metrics = score(res, prep.labels)
    return res


def score(res: ClusterResult, labels: LabelVector | None) -> dict:
    m = {"silhouette": float(res.silhouette)}
    if labels is not None:
        m["ari"] = ari(labels, res.labels)
        m["nmi"] = nmi(labels, res.labels)
    return m


# ------------------------------------------------------------------ outputs


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_manifest(out_dir, artifacts, status: str = "ok", error: str | None = None) -> Path:
    """List every artifact with its sha256; ``status`` is ``failed`` for partial outputs."""
    out = Path(out_dir)
    entries = {}
    for name in sorted(set(artifacts)):
        p = out / name
        if p.exists():
            entries[name] = {"sha256": sha256(p), "bytes": p.stat().st_size}
    manifest = {"status": status, "artifacts": entries}
    if error is not None:
        manifest["error"] = error
    path = out / MANIFEST
    write_json(manifest, path)
    return path


def write_assignments(path, cell_ids, labels) -> None:
    write_rows(path, ["cell_id", "cluster"], zip(cell_ids, (int(v) for v in labels)))


def write_embedding(path, cell_ids, z) -> None:
    z = np.asarray(z, dtype=np.float64)
    header = ["cell_id"] + [f"z{i + 1}" for i in range(z.shape[1])]
    write_rows(path, header, ([cid, *row] for cid, row in zip(cell_ids, z)))


LOSS_COLUMNS = ("epoch", "phase", "L_cell", "L_gene", "L_ssl", "L_ul", "total", "silhouette")


def write_losses(path, trace) -> None:
    write_rows(path, LOSS_COLUMNS, ([r.get(c) for c in LOSS_COLUMNS] for r in trace))


def write_bundle(out_dir, prep: Prepared, res: ClusterResult, cfg: RunConfig) -> list[str]:
    """Write assignments, embedding, losses, checkpoint and report; returns artifact names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_assignments(out / "assignments.csv", prep.x.cell_ids, res.labels)
    write_embedding(out / "embedding.csv", prep.x.cell_ids, res.z_f)
    write_losses(out / "losses.csv", res.losses)
    tc.save_checkpoint(res.params, out / "checkpoint.txt")
    report = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "ablation": res.ablation,
        "metrics": res.metrics,
        "best_epoch": res.best_epoch,
        "stopped_epoch": res.stopped_epoch,
        "cells_in": prep.raw.n_cells,
        "cells_kept": prep.x.n_cells,
        "genes_kept": prep.x.n_genes,
        "n_clusters_found": int(len(np.unique(res.labels))),
    }
    write_json(report, out / "report.json")
    return ["assignments.csv", "embedding.csv", "losses.csv", "checkpoint.txt", "report.json"]
