"""Compression encoder / decoder and the SSBS wire format.

Layout (little-endian)::

    magic "SSBS" | version u16 | model-id u32 | F u16 | H u32 | W u32 |
    latent dims 3 x u32 | hyper dims 3 x u32 | len(b_h) u32 | len(b_r) u32 |
    b_h | b_r

The hyper stream is produced and consumed first: its decoded symbols give the
scales that condition the main stream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..params import Params
from .entropy import FactorizedModel, GaussianConditional, quantize
from .hyper import HyperWeights, factorized_model, hyper_encode, hyper_sigma
from .rangecoder import RangeDecoder, RangeEncoder

MAGIC = b"SSBS"
VERSION = 1
_HEADER = struct.Struct("<4sHIHII3I3III")
HEADER_SIZE = _HEADER.size


class DecodeError(ValueError):
    """Malformed bitstream. ``field`` names the header field or section at fault."""

    def __init__(self, message: str, field: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def hyper_shape_for(latent_shape) -> tuple[int, int, int]:
    f, h, w = latent_shape
    return (f, -(-h // 2), -(-w // 2))


@dataclass(frozen=True)
class Bitstream:
    model_id: int
    height: int
    width: int
    latent_shape: tuple
    hyper_shape: tuple
    b_h: bytes
    b_r: bytes

    @property
    def channels(self) -> int:
        return self.latent_shape[0]

    @property
    def header_bytes(self) -> int:
        return HEADER_SIZE

    @property
    def payload_bytes(self) -> int:
        return len(self.b_h) + len(self.b_r)

    def __len__(self) -> int:
        return HEADER_SIZE + self.payload_bytes

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, VERSION, self.model_id, self.channels, self.height, self.width,
                            *self.latent_shape, *self.hyper_shape, len(self.b_h), len(self.b_r))
        return head + self.b_h + self.b_r

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Bitstream":
        if len(buf) < 4 or buf[:4] != MAGIC:
            raise DecodeError(f"expected {MAGIC!r}, got {bytes(buf[:4])!r}", "magic")
        if len(buf) < HEADER_SIZE:
            raise DecodeError(f"stream is {len(buf)} bytes, header needs {HEADER_SIZE}", "header")
        (_, version, model_id, f, height, width, l0, l1, l2, h0, h1, h2,
         len_h, len_r) = _HEADER.unpack_from(buf)
        if version != VERSION:
            raise DecodeError(f"unsupported version {version} (expected {VERSION})", "version")
        latent, hyper = (l0, l1, l2), (h0, h1, h2)
        if l0 != f:
            raise DecodeError(f"latent channels {l0} != F {f}", "latent_dims")
        if hyper != hyper_shape_for(latent):
            raise DecodeError(f"{hyper} inconsistent with latent {latent}", "hyper_dims")
        avail = len(buf) - HEADER_SIZE
        if len_h + len_r != avail:
            field = "len_b_r" if len_h <= avail else "len_b_h"
            raise DecodeError(f"declared payload {len_h}+{len_r} bytes, stream carries {avail}", field)
        b_h = bytes(buf[HEADER_SIZE:HEADER_SIZE + len_h])
        b_r = bytes(buf[HEADER_SIZE + len_h:])
        return cls(model_id, height, width, latent, hyper, b_h, b_r)


# -- symbol streams -------------------------------------------------------------

def _encode_hyper(h_hat: np.ndarray, fm: FactorizedModel) -> bytes:
    if h_hat.size == 0:
        return b""
    enc = RangeEncoder()
    for c in range(h_hat.shape[0]):
        table = fm.tables[c]
        for s in h_hat[c].ravel().tolist():
            table.encode(enc, s)
    return enc.finish()


def _decode_hyper(data: bytes, shape, fm: FactorizedModel) -> np.ndarray:
    out = np.zeros(shape, dtype=np.int32)
    if out.size == 0:
        return out
    dec = RangeDecoder(data)
    n = shape[1] * shape[2]
    try:
        for c in range(shape[0]):
            table = fm.tables[c]
            out[c] = np.array([table.decode(dec) for _ in range(n)], dtype=np.int32).reshape(shape[1:])
    except ValueError as exc:
        raise DecodeError(str(exc), "b_h") from None
    if dec.overrun:
        raise DecodeError(f"ran {dec.overrun} bytes past the end", "b_h")
    return out


def _encode_latent(r_hat: np.ndarray, sigma: np.ndarray, gc: GaussianConditional) -> bytes:
    if r_hat.size == 0:
        return b""
    enc = RangeEncoder()
    tables = gc.tables
    for s, t in zip(r_hat.ravel().tolist(), gc.index(sigma).ravel().tolist()):
        tables[t].encode(enc, s)
    return enc.finish()


def _decode_latent(data: bytes, sigma: np.ndarray, gc: GaussianConditional) -> np.ndarray:
    if sigma.size == 0:
        return np.zeros(sigma.shape, dtype=np.int32)
    dec = RangeDecoder(data)
    tables = gc.tables
    try:
        vals = [tables[t].decode(dec) for t in gc.index(sigma).ravel().tolist()]
    except ValueError as exc:
        raise DecodeError(str(exc), "b_r") from None
    if dec.overrun:
        raise DecodeError(f"ran {dec.overrun} bytes past the end", "b_r")
    return np.array(vals, dtype=np.int32).reshape(sigma.shape)


# -- codec ------------------------------------------------------------------------

class Compressed(NamedTuple):
    stream: Bitstream
    r_hat: np.ndarray
    h_hat: np.ndarray
    sigma: np.ndarray


def _sigma_for(h_hat, w, gc, latent_shape) -> np.ndarray:
    if h_hat.size == 0:
        return np.full(latent_shape, gc.sigma_min)
    return hyper_sigma(h_hat, w, gc, grid=latent_shape[1:])


def compress(r: np.ndarray, w: HyperWeights, fm: FactorizedModel, gc: GaussianConditional, *,
             image_size: tuple[int, int] | None = None, model_id: int = 0) -> Compressed:
    r = np.asarray(r, dtype=np.float32)
    if r.ndim != 3:
        raise ValueError(f"latent must be (F, h, w), got {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError("latent contains non-finite values")
    if r.shape[0] != w.channels or r.shape[0] != fm.channels:
        raise ValueError(f"latent has {r.shape[0]} channels, codec expects {w.channels}")
    r_hat = quantize(r)
    hshape = hyper_shape_for(r.shape)
    if r.size:
        h_hat = quantize(hyper_encode(r, w))
    else:
        h_hat = np.zeros(hshape, dtype=np.int32)
    sigma = _sigma_for(h_hat, w, gc, r.shape)
    if image_size is None:
        image_size = (8 * r.shape[1], 8 * r.shape[2])
    stream = Bitstream(
        model_id=model_id,
        height=image_size[0],
        width=image_size[1],
        latent_shape=tuple(r.shape),
        hyper_shape=hshape,
        b_h=_encode_hyper(h_hat, fm),
        b_r=_encode_latent(r_hat, sigma, gc),
    )
    return Compressed(stream, r_hat, h_hat, sigma)


def encode(r, w, fm, gc, **kw) -> Bitstream:
    """Latent r -> Bitstream (hyper stream first, then the scale-conditioned main stream)."""
    return compress(r, w, fm, gc, **kw).stream


def decompress(b: Bitstream | bytes, w: HyperWeights, fm: FactorizedModel, gc: GaussianConditional, *,
               model_id: int | None = None):
    """Returns ``(r_hat, h_hat, sigma)``."""
    if not isinstance(b, Bitstream):
        b = Bitstream.from_bytes(b)
    if model_id is not None and b.model_id != model_id:
        raise DecodeError(f"stream made for model {b.model_id:#010x}, decoder has {model_id:#010x}", "model_id")
    if b.channels != w.channels:
        raise DecodeError(f"stream has F={b.channels}, decoder expects {w.channels}", "channels")
    h_hat = _decode_hyper(b.b_h, b.hyper_shape, fm)
    sigma = _sigma_for(h_hat, w, gc, b.latent_shape)
    r_hat = _decode_latent(b.b_r, sigma, gc)
    return r_hat, h_hat, sigma


def decode(b, w, fm, gc, **kw) -> np.ndarray:
    return decompress(b, w, fm, gc, **kw)[0]


def estimate_rate(r_hat, h_hat, sigma, fm: FactorizedModel, height: int, width: int,
                  gc: GaussianConditional | None = None) -> float:
    """Bits per pixel from the coding tables: (-log2 P(r_hat | h_hat) - log2 P(h_hat)) / (H W)."""
    gc = gc or GaussianConditional()
    bits = gc.bits(r_hat, sigma)
    if np.asarray(h_hat).size:
        bits += fm.bits(h_hat)
    return bits / (height * width)


class FeatureCodec:
    """Hyperprior weights plus entropy models, bound to a model id."""

    def __init__(self, params: Params, gc: GaussianConditional | None = None):
        self.weights = HyperWeights.from_params(params)
        self.fm = factorized_model(params)
        self.gc = gc or GaussianConditional()
        self.model_id = params.checksum(prefix=("he.", "hd.", "em."))

    def compress(self, r, image_size=None) -> Compressed:
        return compress(r, self.weights, self.fm, self.gc, image_size=image_size, model_id=self.model_id)

    def encode(self, r, image_size=None) -> Bitstream:
        return self.compress(r, image_size).stream

    def decompress(self, b, check_model: bool = True):
        return decompress(b, self.weights, self.fm, self.gc, model_id=self.model_id if check_model else None)

    def decode(self, b, check_model: bool = True) -> np.ndarray:
        return self.decompress(b, check_model)[0]

    def estimate_bits(self, c: Compressed) -> float:
        h, w = c.stream.height, c.stream.width
        return estimate_rate(c.r_hat, c.h_hat, c.sigma, self.fm, h, w, self.gc) * h * w
