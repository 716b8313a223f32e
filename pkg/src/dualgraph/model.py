"""Dual autoencoder over the cell graph and gene context, with self-supervised
reconstruction pretraining and KL self-training against a sharpened target.

The network runs in ``ModelConfig.dtype``; the clustering head (soft
assignment, target distribution, KL) always runs in float64.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from . import tensorcore as tc
from .errors import DomainError, NonFiniteError
from .kmeans import kmeans
from .metrics import silhouette

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_gat", "no_genemap")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
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
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.encoder_dims = tuple(int(d) for d in self.encoder_dims)
        if not self.encoder_dims or any(d <= 0 for d in self.encoder_dims):
            raise DomainError(f"encoder dims must be positive, got {self.encoder_dims}")
        if not 0.0 <= self.lam <= 1.0:
            raise DomainError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.n_clusters < 2:
            raise DomainError(f"need at least 2 clusters, got {self.n_clusters}")
        if self.ablation not in ABLATIONS:
            raise DomainError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.dtype not in DTYPES:
            raise DomainError(f"dtype must be one of {tuple(DTYPES)}")
        for name in ("pretrain_epochs", "train_epochs"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")
        for name in ("target_refresh_interval", "silhouette_eval_interval", "patience"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")

    @property
    def bottleneck(self) -> int:
        return self.encoder_dims[-1]

    @property
    def effective_lam(self) -> float:
        return 1.0 if self.ablation == "no_genemap" else self.lam

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


@dataclass
class ModelInputs:
    x: torch.Tensor  # cells x genes, log-normalized expression
    g: torch.Tensor  # cells x d, gene context
    adj: torch.Tensor  # cells x cells, bool

    @classmethod
    def build(cls, x, g, adj, dtype=torch.float64) -> ModelInputs:
        x = torch.as_tensor(np.array(getattr(x, "values", x), dtype=np.float64)).to(dtype)
        g = torch.as_tensor(np.array(g, dtype=np.float64)).to(dtype)
        adj = torch.as_tensor(np.array(getattr(adj, "adjacency", adj)), dtype=torch.bool)
        if x.shape[0] != g.shape[0] or adj.shape != (x.shape[0], x.shape[0]):
            raise DomainError(
                f"inconsistent inputs: x {tuple(x.shape)}, gene context {tuple(g.shape)}, graph {tuple(adj.shape)}"
            )
        if not bool(adj.diagonal().all()):
            raise DomainError("cell graph must contain self-loops")
        return cls(x, g, adj)

    def to(self, dtype) -> ModelInputs:
        return ModelInputs(self.x.to(dtype), self.g.to(dtype), self.adj)

    @property
    def n_cells(self) -> int:
        return self.x.shape[0]


@dataclass
class ModelState:
    params: tc.ParamSet
    config: ModelConfig
    losses: list[dict] = field(default_factory=list)


@dataclass
class ClusterResult:
    labels: np.ndarray
    q: np.ndarray
    p: np.ndarray
    z_f: np.ndarray
    losses: list[dict]
    ablation: str
    best_epoch: int
    stopped_epoch: int
    silhouette: float
    evaluations: list[tuple[int, float]]
    params: tc.ParamSet
    metrics: dict = field(default_factory=dict)


# ---------------------------------------------------------------- parameters


def _decoder_dims(config: ModelConfig) -> list[int]:
    return list(reversed(config.encoder_dims[:-1]))


def fused_dim(config: ModelConfig) -> int:
    return config.bottleneck * (1 if config.ablation == "no_genemap" else 2)


def init_params(n_features: int, gene_dim: int, config: ModelConfig) -> tc.ParamSet:
    """Glorot-initialized weights (zero biases) for every branch the ablation keeps."""
    gen = torch.Generator().manual_seed(config.seed)
    dt = config.torch_dtype
    params: tc.ParamSet = {}
    dims = [n_features, *config.encoder_dims]
    for l, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"cell_enc.{l}.w"] = tc.glorot(a, b, gen, dt)
        if config.ablation == "no_gat":
            params[f"cell_enc.{l}.b"] = torch.zeros(b, dtype=dt)
        else:
            params[f"cell_enc.{l}.attn"] = tc.glorot(2 * b, 1, gen, dt, shape=(2 * b,))
    fused = fused_dim(config)
    dec = [fused, *_decoder_dims(config), n_features]
    for l, (a, b) in enumerate(zip(dec[:-1], dec[1:])):
        params[f"cell_dec.{l}.w"] = tc.glorot(a, b, gen, dt)
        params[f"cell_dec.{l}.b"] = torch.zeros(b, dtype=dt)
    if config.ablation != "no_genemap":
        dims = [gene_dim, *config.encoder_dims]
        for l, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            params[f"gene_enc.{l}.w"] = tc.glorot(a, b, gen, dt)
            params[f"gene_enc.{l}.b"] = torch.zeros(b, dtype=dt)
        dec = [fused, *_decoder_dims(config), gene_dim]
        for l, (a, b) in enumerate(zip(dec[:-1], dec[1:])):
            params[f"gene_dec.{l}.w"] = tc.glorot(a, b, gen, dt)
            params[f"gene_dec.{l}.b"] = torch.zeros(b, dtype=dt)
    for p in params.values():
        p.requires_grad_(True)
    return params


def _n_layers(params, prefix: str) -> int:
    return sum(1 for n in params if n.startswith(prefix) and n.endswith(".w"))


# ------------------------------------------------------------------- forward


def encode_cells(x: torch.Tensor, adj, params: tc.ParamSet) -> torch.Tensor:
    """Stacked graph attention layers; dense layers when the params carry biases instead of attention."""
    h = x
    for l in range(_n_layers(params, "cell_enc.")):
        w = params[f"cell_enc.{l}.w"]
        if f"cell_enc.{l}.attn" in params:
            h = tc.graph_attention_layer(h, adj, w, params[f"cell_enc.{l}.attn"], "relu")
        else:
            h = tc.dense_forward(h, w, params[f"cell_enc.{l}.b"], "relu")
    return h


def encode_genes(g: torch.Tensor, params: tc.ParamSet) -> torch.Tensor:
    h = g
    for l in range(_n_layers(params, "gene_enc.")):
        h = tc.dense_forward(h, params[f"gene_enc.{l}.w"], params[f"gene_enc.{l}.b"], "relu")
    return h


def fuse(z_cell: torch.Tensor, z_gene: torch.Tensor | None) -> torch.Tensor:
    if z_gene is None:
        return torch.relu(z_cell)
    if z_cell.shape[0] != z_gene.shape[0]:
        raise DomainError(f"cannot fuse {z_cell.shape[0]} cell rows with {z_gene.shape[0]} gene rows")
    return torch.relu(torch.cat([z_cell, z_gene], dim=1))


def _decode(z: torch.Tensor, params: tc.ParamSet, prefix: str) -> torch.Tensor:
    n = _n_layers(params, prefix)
    h = z
    for l in range(n):
        act = "identity" if l == n - 1 else "relu"
        h = tc.dense_forward(h, params[f"{prefix}{l}.w"], params[f"{prefix}{l}.b"], act)
    return h


def decode_cells(z_f: torch.Tensor, params: tc.ParamSet) -> torch.Tensor:
    return _decode(z_f, params, "cell_dec.")


def decode_genes(z_f: torch.Tensor, params: tc.ParamSet) -> torch.Tensor:
    return _decode(z_f, params, "gene_dec.")


def has_gene_branch(params: tc.ParamSet) -> bool:
    return any(n.startswith("gene_enc.") for n in params)


def forward(params: tc.ParamSet, data: ModelInputs) -> dict[str, torch.Tensor]:
    z_cell = encode_cells(data.x, data.adj, params)
    z_gene = encode_genes(data.g, params) if has_gene_branch(params) else None
    z_f = fuse(z_cell, z_gene)
    out = {"z_cell": z_cell, "z_f": z_f, "x_rec": decode_cells(z_f, params)}
    if z_gene is not None:
        out["z_gene"] = z_gene
        out["g_rec"] = decode_genes(z_f, params)
    return out


# -------------------------------------------------------------------- losses


def _t(a, dtype=None) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a if dtype is None else a.to(dtype)
    return torch.as_tensor(np.array(a, dtype=np.float64), dtype=dtype or torch.float64)


def loss_cell(x, x_rec) -> torch.Tensor:
    """``1 - mean_i cos(x_i, x'_i)``; a zero row contributes similarity 0."""
    x, x_rec = _t(x), _t(x_rec)
    if x.shape != x_rec.shape:
        raise DomainError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    nx = x.norm(dim=1)
    nr = x_rec.norm(dim=1)
    ok = (nx > 0) & (nr > 0)
    denom = torch.where(ok, nx * nr, torch.ones_like(nx))
    cos = torch.where(ok, (x * x_rec).sum(dim=1) / denom, torch.zeros_like(nx))
    return 1.0 - cos.mean()


def loss_gene(g, g_rec) -> torch.Tensor:
    g, g_rec = _t(g), _t(g_rec)
    if g.shape != g_rec.shape:
        raise DomainError(f"shape mismatch: {tuple(g.shape)} vs {tuple(g_rec.shape)}")
    return (g - g_rec).abs().mean()


def loss_ssl(l_cell, l_gene, lam: float):
    return 2.0 * lam * l_cell + 2.0 * (1.0 - lam) * l_gene


def soft_assign(z, centers) -> torch.Tensor:
    """Student-t kernel ``(1 + |z_i - u_j|^2)^-1`` normalized per row."""
    z, centers = _t(z), _t(centers)
    d2 = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(dim=2)
    k = 1.0 / (1.0 + d2)
    return k / k.sum(dim=1, keepdim=True)


def target_distribution(q) -> torch.Tensor:
    q = _t(q)
    w = q**2 / q.sum(dim=0, keepdim=True)
    return w / w.sum(dim=1, keepdim=True)


def kl_loss(p, q) -> torch.Tensor:
    """``sum_ij p_ij log(p_ij / q_ij)`` with ``0 log 0 = 0``."""
    p, q = _t(p), _t(q)
    return (torch.xlogy(p, p) - torch.xlogy(p, q)).sum()


def hard_labels(q) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return np.asarray(q.detach().cpu().numpy() if isinstance(q, torch.Tensor) else q).argmax(axis=1)


def losses(params: tc.ParamSet, data: ModelInputs, lam: float, p_target=None) -> dict[str, torch.Tensor]:
    """All loss terms for one full-batch pass.

    With ``p_target`` given, the KL term against ``soft_assign(Z_F, centers)``
    is included and ``total = L_ssl + L_ul``.
    """
    out = forward(params, data)
    l_cell = loss_cell(data.x, out["x_rec"])
    if "g_rec" in out:
        l_gene = loss_gene(data.g, out["g_rec"])
    else:
        l_gene = torch.zeros((), dtype=l_cell.dtype)
    l_ssl = loss_ssl(l_cell, l_gene, lam)
    res = {"z_f": out["z_f"], "cell": l_cell, "gene": l_gene, "ssl": l_ssl, "total": l_ssl}
    if p_target is not None:
        q = soft_assign(out["z_f"].to(torch.float64), params["centers"].to(torch.float64))
        l_ul = kl_loss(_t(p_target), q)
        res["q"] = q
        res["ul"] = l_ul
        res["total"] = l_ssl + l_ul
    return res


def total_loss(params: tc.ParamSet, data: ModelInputs, lam: float, p_target) -> torch.Tensor:
    return losses(params, data, lam, p_target)["total"]


# ------------------------------------------------------------------ training


def init_centers(z_f, c: int, seed: int = 0) -> np.ndarray:
    """k-means++ seeding plus Lloyd iterations on the pretrained embedding."""
    z = np.asarray(z_f.detach().cpu().numpy() if isinstance(z_f, torch.Tensor) else z_f, dtype=np.float64)
    if c > z.shape[0]:
        raise DomainError(f"cannot place {c} centers among {z.shape[0]} cells")
    centers, _ = kmeans(z, c, seed=seed)
    return centers


def _row(epoch, phase, res) -> dict:
    return {
        "epoch": epoch,
        "phase": phase,
        "L_cell": res["cell"].item(),
        "L_gene": res["gene"].item(),
        "L_ssl": res["ssl"].item(),
        "L_ul": res["ul"].item() if "ul" in res else None,
        "total": res["total"].item(),
        "silhouette": None,
    }


def _check(res, epoch, phase):
    if not torch.isfinite(res["total"]):
        raise NonFiniteError(f"non-finite loss at {phase} epoch {epoch}")


def pretrain(data: ModelInputs, config: ModelConfig, params: tc.ParamSet | None = None) -> ModelState:
    """Minimize the reconstruction loss alone for ``pretrain_epochs`` epochs."""
    data = data.to(config.torch_dtype)
    if params is None:
        params = init_params(data.x.shape[1], data.g.shape[1], config)
    opt = tc.Adam(params, config.lr_pretrain)
    lam = config.effective_lam
    trace = []
    for epoch in range(1, config.pretrain_epochs + 1):
        res = losses(params, data, lam)
        _check(res, epoch, "pretrain")
        opt.step(tc.backward(res["total"], params))
        trace.append(_row(epoch, "pretrain", res))
    return ModelState(params, config, trace)


def _safe_silhouette(z: np.ndarray, labels: np.ndarray) -> float:
    if len(np.unique(labels)) < 2:
        return -1.0
    return silhouette(z, labels)


def train(
    data: ModelInputs,
    pretrained: ModelState,
    config: ModelConfig,
    callback: Callable[[int, np.ndarray, np.ndarray, dict], None] | None = None,
) -> ClusterResult:
    """Self-training on ``L_ssl + L_ul`` with silhouette-based early stopping.

    The target ``P`` is recomputed from the current ``Q`` every
    ``target_refresh_interval`` epochs. The silhouette of the hard labels on
    ``Z_F`` is evaluated before training and every
    ``silhouette_eval_interval`` epochs; training stops once ``patience``
    evaluations pass without beating the best score by more than
    ``min_delta``, and the best-scoring snapshot is returned.
    """
    if config.ablation != pretrained.config.ablation:
        raise DomainError("pretrained state was built for a different ablation")
    data = data.to(config.torch_dtype)
    params = {n: p.detach().clone().requires_grad_(True) for n, p in pretrained.params.items() if n != "centers"}
    lam = config.effective_lam
    with torch.no_grad():
        z0 = forward(params, data)["z_f"]
    if not torch.isfinite(z0).all():
        raise NonFiniteError("non-finite embedding after pretraining")
    centers = init_centers(z0, config.n_clusters, config.seed)
    params["centers"] = torch.tensor(centers, dtype=torch.float64, requires_grad=True)
    opt = tc.Adam(params, config.lr_train)

    trace = list(pretrained.losses)
    evaluations: list[tuple[int, float]] = []
    best = None
    best_sil = -np.inf
    since_improve = 0
    p_target = None
    stopped = 0

    def evaluate(epoch, z_f, q, p):
        nonlocal best, best_sil, since_improve
        z = z_f.detach().to(torch.float64).numpy()
        qn = q.detach().numpy()
        labels = hard_labels(qn)
        sil = _safe_silhouette(z, labels)
        evaluations.append((epoch, sil))
        if sil > best_sil + config.min_delta:
            since_improve = 0
        else:
            since_improve += 1
        if sil > best_sil:
            best_sil = sil
            best = dict(epoch=epoch, labels=labels, q=qn.copy(), p=p.numpy().copy(), z=z.copy(),
                        params={n: t.detach().clone() for n, t in params.items()})
        return sil

    with torch.no_grad():
        res = losses(params, data, lam, target_distribution(soft_assign(z0.to(torch.float64), params["centers"])))
    evaluate(0, res["z_f"], res["q"], target_distribution(res["q"]))

    for epoch in range(1, config.train_epochs + 1):
        if p_target is None or (epoch - 1) % config.target_refresh_interval == 0:
            with torch.no_grad():
                z = forward(params, data)["z_f"].to(torch.float64)
                p_target = target_distribution(soft_assign(z, params["centers"]))
        res = losses(params, data, lam, p_target)
        _check(res, epoch, "train")
        grads = tc.backward(res["total"], params)
        row = _row(epoch, "train", res)
        if callback is not None:
            callback(epoch, res["q"].detach().numpy(), p_target.numpy(), row)
        opt.step(grads)
        stopped = epoch
        if epoch % config.silhouette_eval_interval == 0:
            with torch.no_grad():
                after = losses(params, data, lam, p_target)
            row["silhouette"] = evaluate(epoch, after["z_f"], after["q"], p_target)
        trace.append(row)
        if since_improve >= config.patience:
            log.info("early stop at epoch %d (best silhouette %.4f at epoch %d)", epoch, best_sil, best["epoch"])
            break

    return ClusterResult(
        labels=best["labels"],
        q=best["q"],
        p=best["p"],
        z_f=best["z"],
        losses=trace,
        ablation=config.ablation,
        best_epoch=best["epoch"],
        stopped_epoch=stopped,
        silhouette=float(best_sil),
        evaluations=evaluations,
        params=best["params"],
    )


def fit(data: ModelInputs, config: ModelConfig, callback=None) -> ClusterResult:
    state = pretrain(data, config)
    return train(data, state, config, callback)


def config_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["encoder_dims"] = list(config.encoder_dims)
    return d


def clone_state(state: ModelState) -> ModelState:
    return ModelState({n: p.detach().clone() for n, p in state.params.items()}, copy.copy(state.config),
                      list(state.losses))
