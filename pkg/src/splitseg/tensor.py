"""Dense tensor primitives used by every network in the package.

Tensors are plain ``numpy.ndarray`` objects of dtype float32. Feature maps are
channels-first (C, H, W). Reductions accumulate in float64 and the result is
stored back as float32, so every op is deterministic for a given input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DTYPE = np.float32
ACC = np.float64

TENSOR_MAGIC = b"SSTN"
TENSOR_VERSION = 1


class ShapeError(ValueError):
    """Raised when an operand has the wrong shape.

    ``axis`` names the offending axis (e.g. ``"channels"``, ``"height"``).
    """

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def _check_map(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 3:
        raise ShapeError(f"{name} must be rank 3 (C, H, W), got shape {x.shape}", axis="rank")


@dataclass(frozen=True, eq=False)
class ConvSpec:
    """A 2-D (optionally grouped / transposed) convolution layer.

    Weight layout follows the usual convention:
      * regular:    (out_channels, in_channels // groups, kh, kw)
      * transposed: (in_channels, out_channels // groups, kh, kw)

    For transposed layers ``output_padding`` is added to the bottom/right
    border; ``stride - 1`` makes a "same"-padded layer exactly multiply the
    spatial dims by the stride.
    """

    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1
    transposed: bool = False
    output_padding: int = 0

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got {w.shape}", axis="rank")
        if self.groups < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError("groups and stride must be >= 1, padding >= 0")
        if self.transposed:
            cin, cout_g = w.shape[0], w.shape[1]
            if cin % self.groups:
                raise ShapeError(f"in_channels {cin} not divisible by groups {self.groups}", axis="channels")
            cout = cout_g * self.groups
        else:
            cout, cin_g = w.shape[0], w.shape[1]
            if cout % self.groups:
                raise ShapeError(f"out_channels {cout} not divisible by groups {self.groups}", axis="channels")
            cin = cin_g * self.groups
        if self.bias is not None and self.bias.shape != (cout,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({cout},)", axis="channels")
        object.__setattr__(self, "_io", (cin, cout))

    @property
    def in_channels(self) -> int:
        return self._io[0]

    @property
    def out_channels(self) -> int:
        return self._io[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def param_count(self) -> int:
        return self.weight.size + (0 if self.bias is None else self.bias.size)


@dataclass(frozen=True, eq=False)
class BatchNormSpec:
    """Inference-form batch normalization (running statistics only)."""

    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        n = self.mean.shape
        if not (self.var.shape == self.gamma.shape == self.beta.shape == n) or len(n) != 1:
            raise ShapeError("batchnorm parameters must be 1-D of equal length", axis="channels")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if np.any(self.var < 0):
            raise ValueError("variance must be non-negative")

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


def _conv_core(x: np.ndarray, w: np.ndarray, stride: int, groups: int) -> np.ndarray:
    # x already padded, float64; w (out, in/g, kh, kw) float64
    c, _, _ = x.shape
    cout, cin_g, kh, kw = w.shape
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (c, oh, ow, kh, kw)
    oh, ow = windows.shape[1], windows.shape[2]
    cout_g = cout // groups
    out = np.empty((cout, oh, ow), dtype=ACC)
    for g in range(groups):
        # (oh*ow, cin_g*kh*kw) @ (cin_g*kh*kw, cout_g)
        patch = windows[g * cin_g:(g + 1) * cin_g].transpose(1, 2, 0, 3, 4).reshape(oh * ow, cin_g * kh * kw)
        wg = w[g * cout_g:(g + 1) * cout_g].reshape(cout_g, -1)
        out[g * cout_g:(g + 1) * cout_g] = (patch @ wg.T).T.reshape(cout_g, oh, ow)
    return out


def _depthwise_core(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    # groups == in == out: accumulate kernel taps, vectorised over channels
    c, hp, wp = x.shape
    kh, kw = w.shape[2], w.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.zeros((c, oh, ow), dtype=ACC)
    for i in range(kh):
        for j in range(kw):
            tap = x[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
            out += tap * w[:, 0, i, j][:, None, None]
    return out


def conv2d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Grouped, strided 2-D convolution (cross-correlation) of a (C, H, W) map."""
    if spec.transposed:
        return conv_transpose2d(x, spec)
    _check_map(x)
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[0]} channels, layer expects {spec.in_channels}", axis="channels")
    kh, kw = spec.kernel
    p = spec.padding
    if x.shape[1] + 2 * p < kh:
        raise ShapeError(f"height {x.shape[1]} too small for kernel {kh} with padding {p}", axis="height")
    if x.shape[2] + 2 * p < kw:
        raise ShapeError(f"width {x.shape[2]} too small for kernel {kw} with padding {p}", axis="width")
    xp = np.pad(x.astype(ACC), ((0, 0), (p, p), (p, p)))
    w = spec.weight.astype(ACC)
    if spec.groups == spec.in_channels == spec.out_channels and spec.groups > 1:
        out = _depthwise_core(xp, w, spec.stride)
    else:
        out = _conv_core(xp, w, spec.stride, spec.groups)
    if spec.bias is not None:
        out += spec.bias.astype(ACC)[:, None, None]
    return out.astype(DTYPE)


def conv_transpose2d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Transposed convolution via zero-insertion followed by a regular conv.

    Output size per axis: ``(n - 1) * stride - 2 * padding + k + output_padding``.
    """
    if not spec.transposed:
        raise ValueError("conv_transpose2d needs a transposed ConvSpec")
    _check_map(x)
    cin, cout, g = spec.in_channels, spec.out_channels, spec.groups
    if x.shape[0] != cin:
        raise ShapeError(f"input has {x.shape[0]} channels, layer expects {cin}", axis="channels")
    kh, kw = spec.kernel
    s, p, op = spec.stride, spec.padding, spec.output_padding
    if p > kh - 1 or p > kw - 1:
        raise ShapeError("padding larger than kernel extent - 1", axis="height")
    c, h, w_ = x.shape
    dil = np.zeros((c, (h - 1) * s + 1, (w_ - 1) * s + 1), dtype=ACC)
    dil[:, ::s, ::s] = x
    dil = np.pad(dil, ((0, 0), (kh - 1 - p, kh - 1 - p + op), (kw - 1 - p, kw - 1 - p + op)))
    # (in, out/g, kh, kw) -> (out, in/g, kh, kw), spatially flipped
    wt = spec.weight.astype(ACC)
    cin_g, cout_g = cin // g, cout // g
    wt = wt.reshape(g, cin_g, cout_g, kh, kw).transpose(0, 2, 1, 3, 4).reshape(cout, cin_g, kh, kw)
    wt = wt[:, :, ::-1, ::-1]
    if g == cin == cout and g > 1:
        out = _depthwise_core(dil, wt, 1)
    else:
        out = _conv_core(dil, wt, 1, g)
    if spec.bias is not None:
        out += spec.bias.astype(ACC)[:, None, None]
    return out.astype(DTYPE)


def batchnorm_relu(x: np.ndarray, spec: BatchNormSpec) -> np.ndarray:
    _check_map(x)
    if x.shape[0] != spec.channels:
        raise ShapeError(f"input has {x.shape[0]} channels, batchnorm has {spec.channels}", axis="channels")
    scale = spec.gamma.astype(ACC) / np.sqrt(spec.var.astype(ACC) + spec.eps)
    y = (x.astype(ACC) - spec.mean.astype(ACC)[:, None, None]) * scale[:, None, None] + spec.beta.astype(ACC)[:, None, None]
    return np.maximum(y, 0.0).astype(DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}", axis="rank")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} x {b.shape}", axis="inner")
    return (a.astype(ACC) @ b.astype(ACC)).astype(DTYPE)


def softmax_rows(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D operand, got {a.shape}", axis="rank")
    z = a.astype(ACC)
    z = np.exp(z - z.max(axis=1, keepdims=True))
    return (z / z.sum(axis=1, keepdims=True)).astype(DTYPE)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Softmax over axis 0 of a (C, H, W) map."""
    _check_map(x)
    z = x.astype(ACC)
    z = np.exp(z - z.max(axis=0, keepdims=True))
    return (z / z.sum(axis=0, keepdims=True)).astype(DTYPE)


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    # half-pixel (align_corners=False) sampling with edge clamping
    n_out = n_in * factor
    src = (np.arange(n_out, dtype=ACC) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=ACC)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample(x: np.ndarray, factor: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling by integer factors (u, v), corner-unaligned."""
    _check_map(x)
    u, v = factor
    if u < 1 or v < 1:
        raise ValueError("upsampling factors must be >= 1")
    mh = _interp_matrix(x.shape[1], u)
    mw = _interp_matrix(x.shape[2], v)
    y = np.einsum("oh,chw,pw->cop", mh, x.astype(ACC), mw, optimize=True)
    return y.astype(DTYPE)


def tokens(x: np.ndarray) -> np.ndarray:
    """(d, h, w) -> (h*w, d), height-major token order."""
    _check_map(x)
    d = x.shape[0]
    return np.ascontiguousarray(x.reshape(d, -1).T)


def untokens(t: np.ndarray, h: int, w: int) -> np.ndarray:
    """(h*w, d) -> (d, h, w); inverse of :func:`tokens`."""
    if t.ndim != 2 or t.shape[0] != h * w:
        raise ShapeError(f"cannot reshape {t.shape} to a {h}x{w} grid", axis="tokens")
    return np.ascontiguousarray(t.T.reshape(t.shape[1], h, w))


# -- raw tensor files -------------------------------------------------------

def tensor_to_bytes(x: np.ndarray) -> bytes:
    x = np.asarray(x, dtype="<f4")
    head = TENSOR_MAGIC + struct.pack("<HB", TENSOR_VERSION, x.ndim)
    head += struct.pack(f"<{x.ndim}I", *x.shape)
    return head + x.tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != TENSOR_MAGIC:
        raise ValueError("not a tensor file (bad magic)")
    version, rank = struct.unpack_from("<HB", buf, 4)
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor file version {version}")
    off = 7
    if len(buf) < off + 4 * rank:
        raise ValueError("truncated tensor header")
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) != off + 4 * n:
        raise ValueError(f"tensor payload is {len(buf) - off} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(DTYPE).reshape(dims)


def save_tensor(path, x: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


@dataclass(frozen=True, eq=False)
class ConvBN:
    """Convolution (regular or transposed) followed by BatchNorm + ReLU."""

    conv: ConvSpec
    bn: BatchNormSpec

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return batchnorm_relu(conv2d(x, self.conv), self.bn)
