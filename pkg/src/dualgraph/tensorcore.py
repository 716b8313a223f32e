"""Numeric kernel under the model: dense and graph-attention layers,
reverse-mode gradients, Adam, finite-difference checking and checkpoints.

Tensors are ``torch.Tensor``; autograd supplies reverse-mode accumulation.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from .errors import DomainError, NonFiniteError, ParseError

ParamSet = dict[str, torch.Tensor]

ACTIVATIONS = ("relu", "leaky_relu", "identity")
LEAKY_SLOPE = 0.2
CHECKPOINT_MAGIC = "DGCKPT"
CHECKPOINT_VERSION = 1


def activate(x: torch.Tensor, activation: str) -> torch.Tensor:
    if activation == "relu":
        return torch.relu(x)
    if activation == "leaky_relu":
        return torch.nn.functional.leaky_relu(x, LEAKY_SLOPE)
    if activation == "identity":
        return x
    raise DomainError(f"unknown activation {activation!r}")


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def dense_forward(x: torch.Tensor, w: torch.Tensor, bias: torch.Tensor | None = None,
                  activation: str = "identity") -> torch.Tensor:
    if x.dim() != 2 or w.dim() != 2 or x.shape[1] != w.shape[0]:
        raise DomainError(f"shape mismatch: input {tuple(x.shape)} vs weight {tuple(w.shape)}")
    out = x @ w
    if bias is not None:
        if bias.shape != (w.shape[1],):
            raise DomainError(f"shape mismatch: bias {tuple(bias.shape)} vs weight {tuple(w.shape)}")
        out = out + bias
    return activate(out, activation)


def attention_coefficients(wh: torch.Tensor, adj: torch.Tensor, attn: torch.Tensor) -> torch.Tensor:
    """Row-stochastic attention matrix supported on ``adj``.

    Score ``e_ij = leaky_relu(attn . [wh_i || wh_j])``, softmax over the
    neighbors ``j`` of each ``i``.
    """
    g = wh.shape[1]
    if attn.shape != (2 * g,):
        raise DomainError(f"attention vector must have shape ({2 * g},), got {tuple(attn.shape)}")
    if not bool(adj.any(dim=1).all()):
        raise DomainError("graph attention needs every node to have at least one neighbor")
    scores = (wh @ attn[:g])[:, None] + (wh @ attn[g:])[None, :]
    scores = torch.nn.functional.leaky_relu(scores, LEAKY_SLOPE)
    scores = scores.masked_fill(~adj, float("-inf"))
    return torch.softmax(scores, dim=1)


def graph_attention_layer(h: torch.Tensor, adj, w: torch.Tensor, attn: torch.Tensor,
                          activation: str = "relu") -> torch.Tensor:
    """Single-head graph attention: ``act(sum_j alpha_ij W h_j)``."""
    adj = torch.as_tensor(getattr(adj, "adjacency", adj), dtype=torch.bool)
    if adj.shape != (h.shape[0], h.shape[0]):
        raise DomainError(f"adjacency {tuple(adj.shape)} does not match {h.shape[0]} nodes")
    wh = dense_forward(h, w)
    alpha = attention_coefficients(wh, adj, attn)
    return activate(alpha @ wh, activation)


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor], retain_graph: bool = False) -> ParamSet:
    """Gradient of a scalar ``loss`` with respect to every parameter; unused ones get zeros."""
    if loss.numel() != 1:
        raise DomainError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = [n for n, p in params.items() if p.requires_grad]
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True, retain_graph=retain_graph)
    return {n: (torch.zeros_like(params[n]) if g is None else g) for n, g in zip(names, grads)}


class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    def __init__(self, params: ParamSet, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in params.items()}

    @torch.no_grad()
    def step(self, grads: Mapping[str, torch.Tensor]) -> None:
        for n in grads:
            if n not in self.params:
                raise DomainError(f"gradient for unknown parameter {n!r}")
        # a NaN/Inf anywhere makes its sum non-finite; only then look for the culprit
        if grads and not torch.isfinite(torch.stack([g.sum().to(torch.float64) for g in grads.values()])).all():
            for n, g in grads.items():
                if not torch.isfinite(g).all():
                    raise NonFiniteError(f"non-finite gradient for parameter {n!r}")
            raise NonFiniteError("gradient sum overflowed")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for n, g in grads.items():
            m, v = self.m[n], self.v[n]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            self.params[n].addcdiv_(m, denom, value=-self.lr / bc1)


def finite_difference_check(f: Callable[[ParamSet], torch.Tensor], params: ParamSet,
                            eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Largest relative gap between ``backward`` and central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Parameters are perturbed in place and restored.
    """
    analytic = backward(f(params), params)
    worst = 0.0
    with torch.no_grad():
        for name, grad in analytic.items():
            flat = params[name].view(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f(params).item()
                flat[i] = orig - eps
                down = f(params).item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                a = gflat[i].item()
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


def glorot(fan_in: int, fan_out: int, gen: torch.Generator, dtype=torch.float64, shape=None) -> torch.Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = shape or (fan_in, fan_out)
    return (torch.rand(shape, generator=gen, dtype=dtype) * 2 - 1) * limit


def save_checkpoint(params: Mapping[str, torch.Tensor], path) -> None:
    """Text bundle: magic/version line, then ``name,shape,values...`` per tensor."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
        for name, t in params.items():
            if "," in name:
                raise DomainError(f"parameter name {name!r} may not contain commas")
            arr = t.detach().cpu().numpy().astype(np.float64).ravel()
            shape = "x".join(str(s) for s in t.shape)
            fh.write(",".join([name, shape, *(repr(float(v)) for v in arr)]) + "\n")


def load_checkpoint(path, dtype=torch.float64) -> ParamSet:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().split()
        if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
            raise ParseError("not a checkpoint file", path, 1)
        if int(head[1]) != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {head[1]}", path, 1)
        params = {}
        for line, text in enumerate(fh, start=2):
            fields = text.rstrip("\n").split(",")
            if len(fields) < 2:
                raise ParseError("truncated record", path, line)
            name, shape = fields[0], tuple(int(s) for s in fields[1].split("x") if s)
            vals = np.array([float(v) for v in fields[2:]])
            if vals.size != int(np.prod(shape, dtype=np.int64)):
                raise ParseError(f"{name}: {vals.size} values for shape {shape}", path, line)
            params[name] = torch.tensor(vals.reshape(shape), dtype=dtype)
    return params
