"""Batch command line: ``dualgraph <command> [options]``.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, pipeline, synthbench
from .cellgraph import knn_graph, pearson_similarity, save_edge_list
from .config import RunConfig, load_config_file, resolve
from .errors import ConfigError, DomainError, DualGraphError, NonFiniteError, ParseError
from .ingest import load_labels, save_expression_csv
from .metrics import ari, nmi, silhouette
from .model import ABLATIONS

log = logging.getLogger("dualgraph")

LAMBDAS = tuple(round(0.1 * i, 1) for i in range(1, 10))


# ------------------------------------------------------------------ parser


def _shared(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("shared")
    g.add_argument("--config", help="key = value or JSON config file (flags override it)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="run directory")
    g.add_argument("--threads", type=int, help="torch intra-op threads")


def _inputs(p, labels=True, ppi=True) -> None:
    g = p.add_argument_group("inputs")
    g.add_argument("--expression", help="raw cells x genes matrix")
    g.add_argument("--format", dest="expression_format", choices=("csv", "mtx", "mtx_triplet"))
    if labels:
        g.add_argument("--labels", help="cell_id,label CSV (optional)")
    if ppi:
        g.add_argument("--ppi", help="gene_a<TAB>gene_b<TAB>score edge list")


def _preprocessing(p) -> None:
    g = p.add_argument_group("preprocessing")
    g.add_argument("--hvg", dest="n_hvg", type=int, help="number of highly variable genes")
    g.add_argument("--scale", action="store_const", const=True, help="max-scale genes before log")
    g.add_argument("--k", type=int, help="neighbors in the cell graph")


def _node2vec(p) -> None:
    g = p.add_argument_group("gene embedding")
    g.add_argument("--ppi-threshold", type=int)
    g.add_argument("--walk-p", type=float)
    g.add_argument("--walk-q", type=float)
    g.add_argument("--walks-per-node", type=int)
    g.add_argument("--walk-length", type=int)
    g.add_argument("--dim", dest="embedding_dim", type=int)
    g.add_argument("--window", type=int)
    g.add_argument("--negatives", type=int)
    g.add_argument("--sg-epochs", type=int)
    g.add_argument("--sg-lr", type=float)


def _model(p, ablation=True, lam=True) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--clusters", dest="n_clusters", type=int)
    g.add_argument("--encoder-dims", help="comma separated, e.g. 512,256,64")
    if lam:
        g.add_argument("--lam", type=float)
    g.add_argument("--pretrain-epochs", type=int)
    g.add_argument("--train-epochs", type=int)
    g.add_argument("--lr-pretrain", type=float)
    g.add_argument("--lr-train", type=float)
    g.add_argument("--refresh-interval", dest="target_refresh_interval", type=int)
    g.add_argument("--eval-interval", dest="silhouette_eval_interval", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--min-delta", type=float)
    g.add_argument("--dtype", choices=("float32", "float64"))
    if ablation:
        g.add_argument("--ablation", choices=ABLATIONS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualgraph", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("preprocess", argument_default=S, help="QC, normalize and select HVGs")
    _shared(p), _inputs(p, labels=False, ppi=False), _preprocessing(p)

    p = sub.add_parser("graph", argument_default=S, help="build the cell KNN graph")
    _shared(p), _inputs(p, labels=False, ppi=False), _preprocessing(p)

    p = sub.add_parser("embed-genes", argument_default=S, help="node2vec embedding of the PPI network")
    _shared(p)
    p.add_argument("--ppi")
    _node2vec(p)

    p = sub.add_parser("train", argument_default=S, help="run the full pipeline and write a result bundle")
    _shared(p), _inputs(p), _preprocessing(p), _node2vec(p), _model(p)

    p = sub.add_parser("evaluate", argument_default=S, help="score assignments against labels")
    _shared(p)
    p.add_argument("--assignments", required=True)
    p.add_argument("--labels")
    p.add_argument("--embedding", help="embedding.csv for the silhouette")

    p = sub.add_parser("ablate", argument_default=S, help="full vs no_gat vs no_genemap")
    _shared(p), _inputs(p), _preprocessing(p), _node2vec(p), _model(p, ablation=False)
    p.add_argument("--seeds", help="comma separated seeds (default: --seed)")

    p = sub.add_parser("sweep-lambda", argument_default=S, help="lambda = 0.1 ... 0.9")
    _shared(p), _inputs(p), _preprocessing(p), _node2vec(p), _model(p, lam=False)

    p = sub.add_parser("synth", argument_default=S, help="write a synthetic benchmark dataset")
    _shared(p)
    p.add_argument("--cells", dest="n_cells", type=int)
    p.add_argument("--genes", dest="n_genes", type=int)
    p.add_argument("--clusters", dest="n_clusters", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--overlap", type=float)
    p.add_argument("--modules", dest="n_modules", type=int)
    p.add_argument("--signature-size", type=int)
    p.add_argument("--high-mean", type=float)
    p.add_argument("--low-mean", type=float)
    p.add_argument("--p-intra", type=float)
    p.add_argument("--p-inter", type=float)
    p.add_argument("--min-score", type=int)
    return parser


_NOT_CONFIG = {"command", "verbose", "config", "seeds", "assignments", "embedding"}


def run_config(args: argparse.Namespace) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    if isinstance(flags.get("encoder_dims"), str):
        flags["encoder_dims"] = [d for d in flags["encoder_dims"].split(",") if d.strip()]
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    return resolve(file_values, flags)


# ------------------------------------------------------------------ commands


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_preprocess(args, cfg: RunConfig) -> int:
    raw, x = pipeline.load_and_preprocess(cfg)
    out = _outdir(cfg)
    save_expression_csv(x, out / "processed.csv")
    summary = {
        "cells_in": raw.n_cells,
        "cells_kept": x.n_cells,
        "cells_dropped": raw.n_cells - x.n_cells,
        "genes_in": raw.n_genes,
        "genes_kept": x.n_genes,
        "config": cfg.to_dict(),
    }
    pipeline.write_json(summary, out / "summary.json")
    pipeline.write_manifest(out, ["processed.csv", "summary.json"])
    print(f"kept {x.n_cells}/{raw.n_cells} cells, {x.n_genes} genes -> {out}")
    return 0


def cmd_graph(args, cfg: RunConfig) -> int:
    raw, x = pipeline.load_and_preprocess(cfg)
    g = knn_graph(pearson_similarity(x), cfg.k)
    out = _outdir(cfg)
    save_edge_list(g, out / "cell_graph.csv")
    (out / "cells.txt").write_text("\n".join(x.cell_ids) + "\n", encoding="utf-8")
    pipeline.write_json({"n_cells": g.n, "k": g.k, "n_edges": len(g.edges()), "config": cfg.to_dict()},
                        out / "graph.json")
    pipeline.write_manifest(out, ["cell_graph.csv", "cells.txt", "graph.json"])
    print(f"{g.n} cells, {len(g.edges())} undirected edges (k={g.k}) -> {out}")
    return 0


def cmd_embed_genes(args, cfg: RunConfig) -> int:
    emb = pipeline.gene_embeddings(cfg)
    out = _outdir(cfg)
    emb.save(out / "gene_embedding.csv")
    pipeline.write_json({"n_genes": len(emb.genes), "dim": emb.dim, "config": cfg.to_dict()},
                        out / "embed.json")
    pipeline.write_manifest(out, ["gene_embedding.csv", "embed.json"])
    print(f"embedded {len(emb.genes)} genes in {emb.dim} dims -> {out}")
    return 0


def _print_metrics(prefix: str, m: dict) -> None:
    parts = [f"{k.upper() if k != 'silhouette' else 'SC'}={m[k]:.4f}" for k in ("ari", "nmi", "silhouette") if k in m]
    print(f"{prefix}{' '.join(parts)}")


def cmd_train(args, cfg: RunConfig) -> int:
    out = _outdir(cfg)
    written: list[str] = []
    try:
        prep = pipeline.prepare(cfg, with_genes=cfg.ablation != "no_genemap")
        res = pipeline.run_model(prep, cfg)
        written = pipeline.write_bundle(out, prep, res, cfg)
    except Exception as exc:
        pipeline.write_manifest(out, [p.name for p in out.iterdir() if p.name != pipeline.MANIFEST],
                                status="failed", error=str(exc))
        raise
    pipeline.write_manifest(out, written)
    _print_metrics("", res.metrics)
    return 0


def _read_assignments(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    ids, labs = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["cell_id", "cluster"]:
            raise ParseError("expected header cell_id,cluster", path, 1)
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, got {len(row)}", path, reader.line_num)
            try:
                labs.append(int(row[1]))
            except ValueError:
                raise ParseError(f"non-integer cluster {row[1]!r}", path, reader.line_num) from None
            ids.append(row[0])
    return ids, np.array(labs, dtype=np.int64)


def _read_embedding(path, cell_ids) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if row:
                rows[row[0]] = [float(v) for v in row[1:]]
    missing = [c for c in cell_ids if c not in rows]
    if missing:
        raise DomainError(f"{path}: no embedding row for cell {missing[0]!r}")
    return np.array([rows[c] for c in cell_ids])


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ids, pred = _read_assignments(args.assignments)
    metrics = {}
    if cfg.labels is not None:
        truth = load_labels(cfg.labels, ids, allow_extra=True)
        metrics["ari"] = ari(truth, pred)
        metrics["nmi"] = nmi(truth, pred)
    if getattr(args, "embedding", None):
        z = _read_embedding(args.embedding, ids)
        metrics["silhouette"] = silhouette(z, pred) if len(np.unique(pred)) > 1 else -1.0
    if not metrics:
        raise ConfigError("evaluate needs --labels and/or --embedding")
    out = _outdir(cfg)
    pipeline.write_json({"metrics": metrics, "n_cells": len(ids), "assignments": str(args.assignments)},
                        out / "evaluation.json")
    pipeline.write_manifest(out, ["evaluation.json"])
    _print_metrics("", metrics)
    return 0


def _seeds(args, cfg: RunConfig) -> list[int]:
    text = getattr(args, "seeds", None)
    if text is None:
        return [cfg.seed]
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad --seeds value {text!r}") from None
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError("--seeds must list distinct integers")
    return seeds


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = _outdir(cfg)
    rows, written = [], []
    for seed in _seeds(args, cfg):
        scfg = cfg.replace(seed=seed)
        prep = pipeline.prepare(scfg)
        for mode in ABLATIONS:
            mcfg = scfg.replace(ablation=mode)
            res = pipeline.run_model(prep, mcfg)
            sub = f"seed{seed}/{mode}"
            names = pipeline.write_bundle(out / sub, prep, res, mcfg)
            written += [f"{sub}/{n}" for n in names]
            rows.append({"seed": seed, "ablation": mode, **res.metrics})
            _print_metrics(f"seed={seed} {mode:<10} ", res.metrics)
    cols = ["seed", "ablation"] + [k for k in ("ari", "nmi", "silhouette") if k in rows[0]]
    pipeline.write_rows(out / "ablation.csv", cols, ([r[c] for c in cols] for r in rows))
    pipeline.write_json({"seeds": _seeds(args, cfg), "rows": rows, "config": cfg.to_dict()}, out / "ablation.json")
    pipeline.write_manifest(out, written + ["ablation.csv", "ablation.json"])
    return 0


def cmd_sweep_lambda(args, cfg: RunConfig) -> int:
    out = _outdir(cfg)
    prep = pipeline.prepare(cfg)
    rows, written = [], []
    for lam in LAMBDAS:
        lcfg = cfg.replace(lam=lam)
        res = pipeline.run_model(prep, lcfg)
        sub = f"lambda_{lam:.1f}"
        written += [f"{sub}/{n}" for n in pipeline.write_bundle(out / sub, prep, res, lcfg)]
        rows.append({"lam": lam, **res.metrics})
        _print_metrics(f"lambda={lam:.1f} ", res.metrics)
    cols = ["lam"] + [k for k in ("ari", "nmi", "silhouette") if k in rows[0]]
    pipeline.write_rows(out / "sweep.csv", cols, ([r[c] for c in cols] for r in rows))
    pipeline.write_json({"seed": cfg.seed, "rows": rows, "config": cfg.to_dict()}, out / "sweep.json")
    pipeline.write_manifest(out, written + ["sweep.csv", "sweep.json"])
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    names = {f for f in synthbench.SynthSpec.__dataclass_fields__}
    kw = {k: v for k, v in vars(args).items() if k in names and k != "seed"}
    spec = synthbench.SynthSpec(seed=cfg.seed, **kw)
    out = _outdir(cfg)
    paths = synthbench.write(spec, out)
    pipeline.write_manifest(out, [p.name for p in paths.values()])
    print(f"wrote {spec.n_cells} cells x {spec.n_genes} genes, {spec.n_clusters} clusters -> {out}")
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "graph": cmd_graph,
    "embed-genes": cmd_embed_genes,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep-lambda": cmd_sweep_lambda,
    "synth": cmd_synth,
}


def _synth_config(args) -> RunConfig:
    # synth only uses the shared flags; its own options belong to SynthSpec
    shared = {k: getattr(args, k) for k in ("seed", "out", "threads") if hasattr(args, k)}
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    return resolve(file_values, shared)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    t0 = time.perf_counter()
    try:
        cfg = _synth_config(args) if args.command == "synth" else run_config(args)
        pipeline.setup_threads(cfg.threads)
        code = COMMANDS[args.command](args, cfg)
    except (ConfigError, ParseError, DomainError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"dualgraph {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteError as exc:
        print(f"dualgraph {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 1
    except (DualGraphError, OSError) as exc:
        print(f"dualgraph {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
