"""Run configuration: defaults, a ``key = value`` (or JSON) file, then CLI flags."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError, DualGraphError
from .genegraph import WalkParams
from .model import ModelConfig


@dataclass
class RunConfig:
    # inputs and outputs
    expression: str | None = None
    expression_format: str = "csv"
    labels: str | None = None
    ppi: str | None = None
    out: str = "run"
    # preprocessing and graphs
    n_hvg: int = 2000
    scale: bool = False
    k: int = 15
    ppi_threshold: int = 400
    # node2vec
    walk_p: float = 1.0
    walk_q: float = 1.0
    walks_per_node: int = 10
    walk_length: int = 80
    embedding_dim: int = 128
    window: int = 10
    negatives: int = 5
    sg_epochs: int = 5
    sg_lr: float = 0.025
    # model
    n_clusters: int = 2
    encoder_dims: tuple[int, ...] = (512, 256, 64)
    lam: float = 0.5
    pretrain_epochs: int = 200
    train_epochs: int = 5000
    lr_pretrain: float = 0.0002
    lr_train: float = 0.0005
    target_refresh_interval: int = 100
    silhouette_eval_interval: int = 100
    patience: int = 5
    min_delta: float = 1e-3
    ablation: str = "full"
    dtype: str = "float32"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        self.encoder_dims = tuple(int(d) for d in self.encoder_dims)
        if self.expression_format not in ("csv", "mtx", "mtx_triplet"):
            raise ConfigError(f"unknown expression_format {self.expression_format!r}")
        if self.n_hvg <= 0:
            raise ConfigError(f"n_hvg must be positive, got {self.n_hvg}")
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if not 0 <= self.ppi_threshold <= 1000:
            raise ConfigError(f"ppi_threshold must lie in [0, 1000], got {self.ppi_threshold}")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        for name in ("embedding_dim", "window", "negatives", "sg_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        try:
            self.walk_params()
            self.model_config()
        except DualGraphError as exc:
            raise ConfigError(str(exc)) from None

    def walk_params(self) -> WalkParams:
        return WalkParams(self.walk_p, self.walk_q, self.walks_per_node, self.walk_length, self.seed)

    def model_config(self, **overrides) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        kw = {n: getattr(self, n) for n in names}
        kw.update(overrides)
        return ModelConfig(**kw)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["encoder_dims"] = list(self.encoder_dims)
        return d


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    """Convert a raw value (string from a key=value file, or JSON scalar) to the field type."""
    kind = str(_FIELDS[name].type)
    if value is None or (isinstance(value, str) and value.strip().lower() in ("none", "null", "")):
        if "None" in kind:
            return None
        raise ConfigError(f"{name} may not be empty")
    try:
        if kind.startswith("tuple"):
            if isinstance(value, str):
                value = [v for v in value.replace("[", "").replace("]", "").replace(",", " ").split()]
            return tuple(int(v) for v in value)
        if kind == "bool":
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(str(value).strip()) if isinstance(value, str) else int(value)
        if kind == "float":
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name}: {value!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines (``#`` comments) or a JSON object."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            raw = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{source}: expected a JSON object")
        items = list(raw.items())
    else:
        items = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            items.append((key.strip(), value.strip().strip('"').strip("'")))
    out = {}
    for key, value in items:
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config_file(path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def resolve(file_values: Mapping[str, Any] | None = None, flags: Mapping[str, Any] | None = None) -> RunConfig:
    """Merge with precedence flag > file > default; ``None`` flags are treated as unset."""
    merged: dict[str, Any] = {}
    for source in (file_values or {}, flags or {}):
        for key, value in source.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            if value is not None:
                merged[key] = _coerce(key, value)
    try:
        return RunConfig(**merged)
    except DualGraphError as exc:
        raise ConfigError(str(exc)) from None


def dump_config(cfg: RunConfig) -> str:
    """``key = value`` text that :func:`parse_config_text` reads back to the same config."""
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
