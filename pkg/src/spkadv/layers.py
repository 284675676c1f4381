"""Sequence layers built on :mod:`spkadv.autodiff`.

Sequences are batched as ``(B, T, D)`` nodes with a boolean ``(B, T)`` mask;
padding sits at the end of each row.  Parameters live in flat dicts keyed by
dotted names so groups can be sliced by prefix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Node

Params = dict[str, Node]

KINDS = ("recurrent", "bidirectional-recurrent", "linear", "subsample", "stats-pool")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    input_dim: int
    output_dim: int
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.output_dim <= 0 or self.input_dim <= 0:
            raise ValueError(f"{self.kind}: dims must be positive")
        if self.extra.get("factor", 1) < 1:
            raise ValueError("subsample factor must be >= 1")

    @property
    def hidden_dim(self) -> int:
        if self.kind == "bidirectional-recurrent":
            if self.output_dim % 2:
                raise ValueError("bidirectional output_dim must be even")
            return self.output_dim // 2
        return self.output_dim


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def with_prefix(params: Params, prefix: str) -> Params:
    return {k: v for k, v in params.items() if k.startswith(prefix)}


# --------------------------------------------------------------------------
# linear


def init_linear(rng, prefix: str, in_dim: int, out_dim: int) -> Params:
    return {
        f"{prefix}.W": ad.parameter(glorot(rng, in_dim, out_dim), f"{prefix}.W"),
        f"{prefix}.b": ad.parameter(np.zeros(out_dim), f"{prefix}.b"),
    }


def linear(params: Params, prefix: str, x: Node) -> Node:
    W = params[f"{prefix}.W"]
    if x.shape[-1] != W.shape[0]:
        raise ad.ShapeError(f"linear {prefix}: input dim {x.shape[-1]} != {W.shape[0]}")
    return ad.matmul(x, W) + params[f"{prefix}.b"]


# --------------------------------------------------------------------------
# gated recurrent cell
#
#   r, z = sigmoid(x Wx[:, :2H] + h Wh[:, :2H] + b[:2H])
#   n    = tanh(x Wx[:, 2H:] + b[2H:] + r * (h Wh[:, 2H:]))
#   h'   = n + z * (h - n)


def init_recurrent(rng, prefix: str, in_dim: int, hidden: int) -> Params:
    Wx = np.concatenate([glorot(rng, in_dim, hidden) for _ in range(3)], axis=1)
    Wh = np.concatenate([glorot(rng, hidden, hidden) for _ in range(3)], axis=1)
    return {
        f"{prefix}.Wx": ad.parameter(Wx, f"{prefix}.Wx"),
        f"{prefix}.Wh": ad.parameter(Wh, f"{prefix}.Wh"),
        f"{prefix}.b": ad.parameter(np.zeros(3 * hidden), f"{prefix}.b"),
    }


def init_bidirectional(rng, prefix: str, in_dim: int, hidden: int) -> Params:
    p = init_recurrent(rng, f"{prefix}.fwd", in_dim, hidden)
    p.update(init_recurrent(rng, f"{prefix}.bwd", in_dim, hidden))
    return p


def gru_step(Wh: Node, gx_rz: Node, gx_n: Node, h: Node) -> Node:
    H = h.shape[-1]
    gh = ad.matmul(h, Wh)
    rz = ad.sigmoid(gx_rz + gh[:, :2 * H])
    r, z = rz[:, :H], rz[:, H:]
    n = ad.tanh(gx_n + r * gh[:, 2 * H:])
    return n + z * (h - n)


def _masks(mask: np.ndarray, hidden: int):
    m = mask.astype(ad.DTYPE)
    return m, np.broadcast_to(m[:, :, None], m.shape + (hidden,))


def recurrent_forward(params: Params, prefix: str, x: Node, mask: np.ndarray,
                      reverse: bool = False) -> Node:
    """Run one direction over ``x`` (B, T, D); masked frames output zero and
    carry the previous state through unchanged."""
    Wx, Wh, b = params[f"{prefix}.Wx"], params[f"{prefix}.Wh"], params[f"{prefix}.b"]
    B, T, D = x.shape
    if D != Wx.shape[0]:
        raise ad.ShapeError(f"recurrent {prefix}: input dim {D} != {Wx.shape[0]}")
    if mask.shape != (B, T):
        raise ad.ShapeError(f"recurrent {prefix}: mask {mask.shape} != {(B, T)}")
    H = Wh.shape[0]
    gx = ad.matmul(x, Wx) + b
    gx_rz, gx_n = gx[:, :, :2 * H], gx[:, :, 2 * H:]
    m, m3 = _masks(mask, H)

    h = ad.constant(np.zeros((B, H)))
    outs = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        h_new = gru_step(Wh, gx_rz[:, t], gx_n[:, t], h)
        if m[:, t].all():
            h = h_new
        else:
            mt = ad.constant(m3[:, t])
            h = mt * h_new + (1.0 - mt) * h
        outs[t] = h
    out = ad.stack(outs, axis=1)
    if not m.all():
        out = out * ad.constant(m3)
    return out


def bidirectional_forward(params: Params, prefix: str, x: Node, mask: np.ndarray) -> Node:
    fwd = recurrent_forward(params, f"{prefix}.fwd", x, mask)
    bwd = recurrent_forward(params, f"{prefix}.bwd", x, mask, reverse=True)
    return ad.concat([fwd, bwd], axis=-1)


# --------------------------------------------------------------------------
# subsampling and pooling


def subsample(x, mask: np.ndarray, factor: int):
    """Keep frames 0, s, 2s, ... of ``x`` (B, T, D); returns ``(x', mask')``."""
    if factor < 1:
        raise ValueError(f"subsample factor must be >= 1, got {factor}")
    if x.shape[1] == 0:
        raise ValueError("subsample: empty input sequence")
    if factor == 1:
        return x, mask
    return x[:, ::factor], mask[:, ::factor]


def subsampled_length(T: int, factor: int) -> int:
    return -(-T // factor)


STATS_EPS = 1e-8


def stats_pool(x: Node, mask: np.ndarray) -> Node:
    """Masked per-dim mean and population stddev over time: (B, T, D) -> (B, 2D)."""
    counts = mask.sum(axis=1).astype(ad.DTYPE)
    if np.any(counts == 0):
        raise ValueError("stats_pool: every sequence needs at least one unmasked frame")
    D = x.shape[-1]
    m3 = ad.constant(np.broadcast_to(mask[:, :, None].astype(ad.DTYPE), x.shape))
    inv = ad.constant(np.broadcast_to((1.0 / counts)[:, None], (x.shape[0], D)))
    mu = ad.sum_(x * m3, axis=1) * inv
    centered = _center(x, mu) * m3
    var = ad.sum_(centered * centered, axis=1) * inv
    std = ad.sqrt(var + STATS_EPS)
    return ad.concat([mu, std], axis=-1)


def _center(x: Node, mu: Node) -> Node:
    # (B, T, D) - (B, D) broadcast over time, expressed through a swap so the
    # subtraction stays a leading-dimension broadcast
    xt = ad.swapaxes(x, 0, 1)  # (T, B, D)
    return ad.swapaxes(xt - mu, 0, 1)
