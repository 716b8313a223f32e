"""Loading and preprocessing of expression matrices, labels and PPI edge lists."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, ParseError


class Stage(enum.IntEnum):
    RAW = 0
    QC_FILTERED = 1
    NORMALIZED = 2
    HVG_SELECTED = 3


@dataclass(frozen=True)
class ExpressionMatrix:
    values: np.ndarray
    cell_ids: tuple[str, ...]
    gene_symbols: tuple[str, ...]
    stage: Stage = Stage.RAW

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DomainError(f"expression values must be 2-D, got shape {values.shape}")
        object.__setattr__(self, "cell_ids", tuple(str(c) for c in self.cell_ids))
        object.__setattr__(self, "gene_symbols", tuple(str(g) for g in self.gene_symbols))
        if values.shape[0] != len(self.cell_ids):
            raise DomainError(f"{values.shape[0]} rows but {len(self.cell_ids)} cell ids")
        if values.shape[1] != len(self.gene_symbols):
            raise DomainError(f"{values.shape[1]} columns but {len(self.gene_symbols)} gene symbols")
        dup = _first_duplicate(self.gene_symbols)
        if dup is not None:
            raise DomainError(f"duplicate gene symbol {dup!r}")
        if not np.all(np.isfinite(values)):
            raise DomainError("expression values must be finite")
        if np.any(values < 0):
            r, c = np.argwhere(values < 0)[0]
            raise DomainError(
                f"negative expression value {values[r, c]} for cell {self.cell_ids[r]!r}, "
                f"gene {self.gene_symbols[c]!r}"
            )
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "stage", Stage(self.stage))

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes(self) -> int:
        return self.values.shape[1]

    def _replace(self, values=None, cell_ids=None, gene_symbols=None, stage=None) -> ExpressionMatrix:
        new_stage = self.stage if stage is None else Stage(stage)
        if new_stage < self.stage:
            raise DomainError(f"stage cannot move backwards ({self.stage.name} -> {new_stage.name})")
        return ExpressionMatrix(
            self.values if values is None else values,
            self.cell_ids if cell_ids is None else cell_ids,
            self.gene_symbols if gene_symbols is None else gene_symbols,
            new_stage,
        )

    def select_cells(self, idx) -> ExpressionMatrix:
        idx = np.asarray(idx)
        return self._replace(values=self.values[idx], cell_ids=[self.cell_ids[i] for i in np.arange(self.n_cells)[idx]])


@dataclass(frozen=True)
class LabelVector:
    labels: np.ndarray
    names: tuple[str, ...] = ()  # original label string per cell

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).copy()
        if labels.ndim != 1:
            raise DomainError("labels must be 1-D")
        if labels.size:
            c = int(labels.max()) + 1
            if labels.min() < 0 or len(np.unique(labels)) != c:
                raise DomainError("labels must be contiguous 0-based class ids")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> LabelVector:
        """Restrict to a subset of cells, re-encoding classes by first appearance."""
        idx = np.arange(len(self.labels))[np.asarray(idx)]
        names = [self.names[i] for i in idx] if self.names else [str(self.labels[i]) for i in idx]
        return encode_labels(names)


@dataclass(frozen=True)
class PpiNetwork:
    nodes: tuple[str, ...]
    edges: dict  # (a, b) with a < b -> weight
    score_threshold: int = 400

    def __post_init__(self):
        nodes = tuple(sorted(set(self.nodes)))
        node_set = set(nodes)
        edges = {}
        for (a, b), w in self.edges.items():
            if a == b:
                raise DomainError(f"self-edge on {a!r}")
            if a not in node_set or b not in node_set:
                raise DomainError(f"edge ({a!r}, {b!r}) has an endpoint outside the node set")
            key = (a, b) if a < b else (b, a)
            if key in edges:
                raise DomainError(f"duplicate edge {key}")
            edges[key] = float(w)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", dict(sorted(edges.items())))

    @cached_property
    def index(self) -> dict[str, int]:
        return {g: i for i, g in enumerate(self.nodes)}

    @cached_property
    def adjacency(self) -> list[list[int]]:
        """Sorted neighbor index lists, one per node."""
        nbrs = [[] for _ in self.nodes]
        for a, b in self.edges:
            i, j = self.index[a], self.index[b]
            nbrs[i].append(j)
            nbrs[j].append(i)
        return [sorted(n) for n in nbrs]

    @cached_property
    def neighbor_sets(self) -> list[frozenset]:
        return [frozenset(n) for n in self.adjacency]

    def neighbors(self, node: str) -> list[str]:
        return [self.nodes[j] for j in self.adjacency[self.index[node]]]

    @property
    def isolated(self) -> list[str]:
        return [g for g, n in zip(self.nodes, self.adjacency) if not n]


def _first_duplicate(items):
    seen = set()
    for it in items:
        if it in seen:
            return it
        seen.add(it)
    return None


def _parse_float(text, path, line):
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"non-numeric value {text!r}", path, line) from None


def load_expression(path, format: str = "csv") -> ExpressionMatrix:
    """Read a raw expression matrix.

    ``csv``: header row of gene symbols, first column cell ids.
    ``mtx_triplet``: whitespace separated ``row col value`` lines (0-based)
    with sidecar files ``<stem>.cells`` and ``<stem>.genes``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    if format == "csv":
        return _load_csv(path)
    if format in ("mtx", "mtx_triplet"):
        return _load_triplet(path)
    raise DomainError(f"unknown expression format {format!r}")


def _load_csv(path: Path) -> ExpressionMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", path) from None
        genes = [g.strip() for g in header[1:]]
        if not genes:
            raise ParseError("header has no gene columns", path, 1)
        cells, rows = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(genes) + 1:
                raise ParseError(f"expected {len(genes) + 1} fields, got {len(row)}", path, line)
            cells.append(row[0].strip())
            vals = [_parse_float(v, path, line) for v in row[1:]]
            if any(v < 0 for v in vals):
                raise DomainError(f"{path}:{line}: negative expression value")
            rows.append(vals)
    if not rows:
        raise DomainError(f"{path}: no cells")
    return ExpressionMatrix(np.array(rows, dtype=np.float64), cells, genes, Stage.RAW)


def _read_ids(path: Path) -> list[str]:
    if not path.exists():
        raise FileNotFoundError(f"missing sidecar file: {path}")
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip()]


def _load_triplet(path: Path) -> ExpressionMatrix:
    cells = _read_ids(path.with_suffix(".cells"))
    genes = _read_ids(path.with_suffix(".genes"))
    if not cells:
        raise DomainError(f"{path}: no cells")
    values = np.zeros((len(cells), len(genes)))
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for line, text in enumerate(fh, start=1):
            text = text.strip()
            if not text or text[0] in "%#":
                continue
            fields = text.split()
            if len(fields) != 3:
                raise ParseError(f"expected 3 fields, got {len(fields)}", path, line)
            try:
                r, c = int(fields[0]), int(fields[1])
            except ValueError:
                raise ParseError("non-integer coordinate", path, line) from None
            v = _parse_float(fields[2], path, line)
            if not (0 <= r < len(cells) and 0 <= c < len(genes)):
                raise ParseError(f"coordinate ({r}, {c}) out of range", path, line)
            if (r, c) in seen:
                raise ParseError(f"duplicate entry ({r}, {c})", path, line)
            if v < 0:
                raise DomainError(f"{path}:{line}: negative expression value")
            seen.add((r, c))
            values[r, c] = v
    return ExpressionMatrix(values, cells, genes, Stage.RAW)


def save_expression_csv(x: ExpressionMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", *x.gene_symbols])
        for cid, row in zip(x.cell_ids, x.values):
            w.writerow([cid, *(repr(float(v)) for v in row)])


def save_expression_triplet(x: ExpressionMatrix, path) -> None:
    path = Path(path)
    rows, cols = np.nonzero(x.values)
    with open(path, "w", encoding="utf-8") as fh:
        for r, c in zip(rows, cols):
            fh.write(f"{r} {c} {float(x.values[r, c])!r}\n")
    path.with_suffix(".cells").write_text("".join(f"{c}\n" for c in x.cell_ids), encoding="utf-8")
    path.with_suffix(".genes").write_text("".join(f"{g}\n" for g in x.gene_symbols), encoding="utf-8")


def _require_stage(x: ExpressionMatrix, stage: Stage, op: str):
    if x.stage != stage:
        raise DomainError(f"{op} expects stage {stage.name.lower()}, got {x.stage.name.lower()}")


def qc_bounds(totals) -> tuple[float, float]:
    """Lower/upper bounds ``Q1 - QD`` and ``Q3 + 3 QD`` on per-cell totals.

    Quartiles use linear interpolation between order statistics and
    ``QD = (Q3 - Q1) / 2``.
    """
    q1, q3 = np.percentile(np.asarray(totals, dtype=np.float64), [25, 75], method="linear")
    qd = (q3 - q1) / 2.0
    return q1 - qd, q3 + 3.0 * qd


def qc_filter_cells(x: ExpressionMatrix) -> ExpressionMatrix:
    _require_stage(x, Stage.RAW, "qc_filter_cells")
    if x.n_cells < 4:
        raise DomainError(f"quality control needs at least 4 cells, got {x.n_cells}")
    totals = x.values.sum(axis=1)
    lo, hi = qc_bounds(totals)
    keep = (totals >= lo) & (totals <= hi)
    if not keep.any():
        raise DomainError("quality control removed every cell")
    out = x.select_cells(np.flatnonzero(keep))
    return out._replace(stage=Stage.QC_FILTERED)


def scale_genes(x: ExpressionMatrix) -> ExpressionMatrix:
    """Divide every gene by its maximum so values lie in [0, 1]; all-zero genes stay zero."""
    _require_stage(x, Stage.QC_FILTERED, "scale_genes")
    mx = x.values.max(axis=0)
    return x._replace(values=x.values / np.where(mx > 0, mx, 1.0))


def log_normalize(x: ExpressionMatrix) -> ExpressionMatrix:
    _require_stage(x, Stage.QC_FILTERED, "log_normalize")
    return x._replace(values=np.log2(x.values + 1.0), stage=Stage.NORMALIZED)


def select_hvg(x: ExpressionMatrix, n: int = 2000) -> ExpressionMatrix:
    """Keep the ``n`` genes with the largest variance, preserving column order.

    Ties in variance go to the lexicographically smaller gene symbol.
    """
    _require_stage(x, Stage.NORMALIZED, "select_hvg")
    if n <= 0:
        raise DomainError(f"number of highly variable genes must be positive, got {n}")
    if x.n_genes <= n:
        return x._replace(stage=Stage.HVG_SELECTED)
    var = x.values.var(axis=0)
    order = sorted(range(x.n_genes), key=lambda j: (-var[j], x.gene_symbols[j]))
    keep = np.sort(np.array(order[:n]))
    return x._replace(
        values=x.values[:, keep],
        gene_symbols=[x.gene_symbols[j] for j in keep],
        stage=Stage.HVG_SELECTED,
    )


def preprocess(x: ExpressionMatrix, n_hvg: int = 2000, scale: bool = False) -> ExpressionMatrix:
    """QC filter, optional per-gene max scaling, log2(v+1), HVG selection."""
    if n_hvg <= 0:
        raise DomainError(f"number of highly variable genes must be positive, got {n_hvg}")
    y = qc_filter_cells(x)
    if scale:
        y = scale_genes(y)
    return select_hvg(log_normalize(y), n_hvg)


def load_ppi(path, score_threshold: int = 400) -> PpiNetwork:
    """Read a STRING-style TSV export with columns gene1, gene2, combined_score.

    Edges scoring below ``score_threshold`` are dropped (their endpoints are
    still recorded as nodes), self-edges are ignored and duplicate unordered
    pairs keep the maximum score.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", path) from None
        cols = {}
        for name in ("gene1", "gene2", "combined_score"):
            if name not in header:
                raise ParseError(f"missing column {name!r}", path, 1)
            cols[name] = header.index(name)
        width = max(cols.values()) + 1
        nodes = set()
        edges = {}
        for row in reader:
            line = reader.line_num
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) < width:
                raise ParseError(f"expected at least {width} fields, got {len(row)}", path, line)
            a, b = row[cols["gene1"]].strip(), row[cols["gene2"]].strip()
            score = _parse_float(row[cols["combined_score"]].strip(), path, line)
            if not 0 <= score <= 1000:
                raise DomainError(f"{path}:{line}: combined_score {score} outside [0, 1000]")
            if a == b:
                continue
            nodes.update((a, b))
            if score < score_threshold:
                continue
            key = (a, b) if a < b else (b, a)
            edges[key] = max(score, edges.get(key, score))
    return PpiNetwork(tuple(nodes), edges, score_threshold)


def save_ppi(net: PpiNetwork, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gene1\tgene2\tcombined_score\n")
        for (a, b), w in net.edges.items():
            fh.write(f"{a}\t{b}\t{w:g}\n")


def encode_labels(names: Sequence[str]) -> LabelVector:
    codes: dict[str, int] = {}
    out = [codes.setdefault(str(n), len(codes)) for n in names]
    inv = {v: k for k, v in codes.items()}
    return LabelVector(np.array(out, dtype=np.int64), tuple(inv[i] for i in out))


def load_labels(path, cell_ids: Sequence[str], allow_extra: bool = False) -> LabelVector:
    """Read ``cell_id,label`` rows and align them to ``cell_ids``.

    Labels are re-encoded as 0-based integers in order of first appearance
    along ``cell_ids``. Rows for cells not in ``cell_ids`` are an error unless
    ``allow_extra`` is set (useful after QC dropped cells).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    by_id: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for row in reader:
            line = reader.line_num
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, got {len(row)}", path, line)
            cid, lab = row[0].strip(), row[1].strip()
            if line == 1 and (cid, lab) == ("cell_id", "label"):
                continue
            if cid in by_id:
                raise ParseError(f"duplicate cell id {cid!r}", path, line)
            by_id[cid] = lab
    wanted = set(cell_ids)
    missing = [c for c in cell_ids if c not in by_id]
    if missing:
        raise DomainError(f"{path}: no label for cell {missing[0]!r}")
    extra = [c for c in by_id if c not in wanted]
    if extra and not allow_extra:
        raise DomainError(f"{path}: label rows for unknown cells, e.g. {extra[0]!r}")
    return encode_labels([by_id[c] for c in cell_ids])


def save_labels(cell_ids: Sequence[str], labels: LabelVector, path) -> None:
    names = labels.names or tuple(str(i) for i in labels.labels)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "label"])
        for cid, lab in zip(cell_ids, names):
            w.writerow([cid, lab])
