"""Single-head self attention, class-token cross attention and context mining."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .params import Initializer, Params
from .tensor import (
    ACC,
    DTYPE,
    ConvBN,
    ConvSpec,
    ShapeError,
    conv2d,
    matmul,
    softmax_rows,
    tokens,
    untokens,
)


@dataclass(frozen=True, eq=False)
class SelfAttentionWeights:
    query: ConvBN
    key: ConvBN
    value: ConvBN
    out: ConvBN

    @property
    def dim(self) -> int:
        return self.query.conv.out_channels

    @classmethod
    def from_params(cls, p: Params, prefix: str) -> "SelfAttentionWeights":
        def proj(name):
            return ConvBN(p.conv(f"{prefix}.{name}"), p.bn(f"{prefix}.{name}_bn"))

        w = cls(proj("query"), proj("key"), proj("value"), proj("out"))
        for pr in (w.query, w.key, w.value, w.out):
            c = pr.conv
            if c.in_channels != w.dim or c.out_channels != w.dim or c.kernel != (1, 1):
                raise ShapeError(f"{prefix}: projections must be 1x1 {w.dim}->{w.dim}", axis="channels")
        return w

    @staticmethod
    def init(ini: Initializer, prefix: str, d: int) -> None:
        for name in ("query", "key", "value", "out"):
            ini.conv(f"{prefix}.{name}", d, d, 1)
            ini.bn(f"{prefix}.{name}_bn", d)


@dataclass(frozen=True, eq=False)
class CrossAttentionWeights:
    """FC projections (``x @ W + b``) and the class tokens (S, d)."""

    w_query: np.ndarray
    b_query: np.ndarray
    w_key: np.ndarray
    b_key: np.ndarray
    class_tokens: np.ndarray

    def __post_init__(self):
        d = self.class_tokens.shape[1]
        for name in ("w_query", "w_key"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}", axis="dim")
        if self.b_query.shape != (d,) or self.b_key.shape != (d,):
            raise ShapeError("FC biases must have length d", axis="dim")

    @property
    def dim(self) -> int:
        return self.class_tokens.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_tokens.shape[0]

    @classmethod
    def from_params(cls, p: Params, prefix: str) -> "CrossAttentionWeights":
        return cls(
            w_query=p[f"{prefix}.fc_query.weight"],
            b_query=p[f"{prefix}.fc_query.bias"],
            w_key=p[f"{prefix}.fc_key.weight"],
            b_key=p[f"{prefix}.fc_key.bias"],
            class_tokens=p[f"{prefix}.class_tokens"],
        )

    @staticmethod
    def init(ini: Initializer, prefix: str, d: int, num_classes: int) -> None:
        ini.linear(f"{prefix}.fc_query", d, d)
        ini.linear(f"{prefix}.fc_key", d, d)
        ini.uniform(f"{prefix}.class_tokens", (num_classes, d), 1.0)


@dataclass(frozen=True, eq=False)
class ContextMiningWeights:
    stage1: SelfAttentionWeights
    skip: ConvSpec
    cross: CrossAttentionWeights
    stage2: SelfAttentionWeights

    def __post_init__(self):
        d = self.stage1.dim
        if not (self.stage2.dim == self.cross.dim == d == self.skip.in_channels == self.skip.out_channels):
            raise ShapeError("context mining members disagree on the internal dim", axis="dim")

    @property
    def dim(self) -> int:
        return self.stage1.dim

    @classmethod
    def from_params(cls, p: Params, prefix: str) -> "ContextMiningWeights":
        return cls(
            stage1=SelfAttentionWeights.from_params(p, f"{prefix}.sa1"),
            skip=p.conv(f"{prefix}.skip"),
            cross=CrossAttentionWeights.from_params(p, f"{prefix}.cross"),
            stage2=SelfAttentionWeights.from_params(p, f"{prefix}.sa2"),
        )

    @staticmethod
    def init(ini: Initializer, prefix: str, d: int, num_classes: int) -> None:
        SelfAttentionWeights.init(ini, f"{prefix}.sa1", d)
        ini.conv(f"{prefix}.skip", d, d, 1)
        CrossAttentionWeights.init(ini, f"{prefix}.cross", d, num_classes)
        SelfAttentionWeights.init(ini, f"{prefix}.sa2", d)


def self_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, w: SelfAttentionWeights,
                   return_weights: bool = False):
    """Single-head self attention over the spatial tokens of (d, h, w) maps.

    No 1/sqrt(d) temperature is applied here; only the class-token cross
    attention scales its logits.
    """
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}", axis="shape")
    if q.ndim != 3:
        raise ShapeError(f"expected (d, h, w) maps, got {q.shape}", axis="rank")
    if q.shape[0] != w.dim:
        raise ShapeError(f"input dim {q.shape[0]} != attention dim {w.dim}", axis="channels")
    _, h, wd = q.shape
    qt = tokens(w.query(q))
    kt = tokens(w.key(k))
    vt = tokens(w.value(v))
    g = softmax_rows(matmul(qt, kt.T))
    out = w.out(untokens(matmul(g, vt), h, wd))
    if return_weights:
        return out, g
    return out


def drop_class_rows(z: np.ndarray, num_tokens: int) -> np.ndarray:
    """Keep the first ``num_tokens`` rows of the (T+S, S) score matrix."""
    if z.ndim != 2 or z.shape[0] < num_tokens:
        raise ShapeError(f"cannot drop class rows from {z.shape} with T={num_tokens}", axis="tokens")
    return z[:num_tokens]


def custom_cross_attention(f: np.ndarray, w: CrossAttentionWeights, return_intermediates: bool = False):
    """Cross attention of feature tokens against learnable class tokens.

    Queries are the feature tokens concatenated with the class tokens, keys are
    the projected class tokens, values are the raw class tokens.
    """
    if f.ndim != 3:
        raise ShapeError(f"expected (d, h, w) map, got {f.shape}", axis="rank")
    d, h, wd = f.shape
    if d != w.dim:
        raise ShapeError(f"input dim {d} != class-token dim {w.dim}", axis="channels")
    t = h * wd
    c = w.class_tokens
    qin = np.concatenate([tokens(f), c.astype(DTYPE)], axis=0)  # (T+S, d)
    qp = (qin.astype(ACC) @ w.w_query.astype(ACC) + w.b_query).astype(DTYPE)
    kp = (c.astype(ACC) @ w.w_key.astype(ACC) + w.b_key).astype(DTYPE)
    z = (qp.astype(ACC) @ kp.astype(ACC).T / math.sqrt(d)).astype(DTYPE)  # (T+S, S)
    g = softmax_rows(drop_class_rows(z, t))
    out = untokens(matmul(g, c), h, wd)
    if return_intermediates:
        return out, {"query": qin, "scores": z, "weights": g}
    return out


def context_mining(f: np.ndarray, w: ContextMiningWeights) -> np.ndarray:
    """skip(f) + SA(f, f, f) + SA(f, X, X) with X the cross-attention output."""
    if f.ndim != 3 or f.shape[0] != w.dim:
        raise ShapeError(f"context mining expects ({w.dim}, h, w), got {f.shape}", axis="channels")
    skip = conv2d(f, w.skip)
    h1 = self_attention(f, f, f, w.stage1)
    kv = custom_cross_attention(f, w.cross)
    h2 = self_attention(f, kv, kv, w.stage2)
    return (skip + h1) + h2
