"""Discretized probability models and their fixed-point coding tables.

Two models are provided:

* :class:`FactorizedModel` -- one discretized Laplacian per channel, used for
  the hyper latent.
* :class:`GaussianConditional` -- zero-mean discretized Gaussians whose scale
  comes from the hyper decoder, used for the main latent. Scales are snapped
  up to a fixed log-spaced table so encoder and decoder index identical CDFs.

Each table covers ``[-M, M]`` plus a trailing escape symbol. Symbols outside
the range are coded as escape, then a sign bit and an order-0 Exp-Golomb code
of ``|s| - M - 1`` using equiprobable binary decisions.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .rangecoder import PRECISION, TOTAL, RangeDecoder, RangeEncoder

SYMBOL_LIMIT = 255


def quantize(t) -> np.ndarray:
    """Round half away from zero to int32."""
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("cannot quantize non-finite values")
    q = np.sign(t) * np.floor(np.abs(t) + 0.5)
    if q.size and np.abs(q).max() > 2**30:
        raise ValueError("value too large to quantize to int32")
    return q.astype(np.int32)


def pmf_to_freqs(pmf: np.ndarray) -> np.ndarray:
    """Quantize a pmf to positive integer frequencies summing to ``2**16``."""
    pmf = np.asarray(pmf, dtype=np.float64)
    pmf = pmf / pmf.sum()
    n = pmf.size
    if n > TOTAL:
        raise ValueError("too many symbols for the coder precision")
    freqs = 1 + np.floor(pmf * (TOTAL - n)).astype(np.int64)
    freqs[int(np.argmax(pmf))] += TOTAL - int(freqs.sum())
    return freqs


def _exp_golomb_bits(n: np.ndarray) -> np.ndarray:
    # sign + unary(k) + k suffix bits, where k = floor(log2(n + 1))
    k = np.floor(np.log2(n.astype(np.float64) + 1.0)).astype(np.int64)
    return 2 * k + 2


class CodingTable:
    """Fixed-point CDF over symbols ``[-M, M]`` plus an escape symbol."""

    __slots__ = ("half", "freqs", "cdf", "_cum", "_fr", "cost")

    def __init__(self, half_width: int, pmf_in_range: np.ndarray, tail: float):
        self.half = int(half_width)
        pmf = np.append(np.asarray(pmf_in_range, dtype=np.float64), max(tail, 0.0))
        self.freqs = pmf_to_freqs(pmf)
        self.cdf = np.concatenate([[0], np.cumsum(self.freqs)])
        self._cum = self.cdf.tolist()
        self._fr = self.freqs.tolist()
        self.cost = PRECISION - np.log2(self.freqs.astype(np.float64))  # bits per table entry

    @property
    def escape_index(self) -> int:
        return 2 * self.half + 1

    def encode(self, enc: RangeEncoder, s: int) -> None:
        i = s + self.half
        if 0 <= i < self.escape_index:
            enc.encode(self._cum[i], self._fr[i])
            return
        e = self.escape_index
        enc.encode(self._cum[e], self._fr[e])
        enc.encode_bit(1 if s < 0 else 0)
        v = abs(s) - self.half  # n + 1 >= 1
        k = v.bit_length() - 1
        for _ in range(k):
            enc.encode_bit(1)
        enc.encode_bit(0)
        for b in range(k - 1, -1, -1):
            enc.encode_bit((v >> b) & 1)

    def decode(self, dec: RangeDecoder) -> int:
        t = dec.target()
        i = bisect.bisect_right(self._cum, t) - 1
        dec.update(self._cum[i], self._fr[i])
        if i != self.escape_index:
            return i - self.half
        neg = dec.decode_bit()
        k = 0
        while dec.decode_bit():
            k += 1
            if k > 40:
                raise ValueError("escape code too long (corrupt stream)")
        v = 1
        for _ in range(k):
            v = (v << 1) | dec.decode_bit()
        s = v + self.half
        return -s if neg else s

    def bits(self, s: np.ndarray) -> np.ndarray:
        """Exact code length in table units (bits) for each symbol in ``s``."""
        s = np.asarray(s, dtype=np.int64)
        i = s + self.half
        inside = (i >= 0) & (i < self.escape_index)
        out = np.empty(s.shape, dtype=np.float64)
        out[inside] = self.cost[i[inside]]
        if not inside.all():
            n = np.abs(s[~inside]) - self.half - 1
            out[~inside] = self.cost[self.escape_index] + _exp_golomb_bits(n)
        return out


def _laplace_cdf(x: np.ndarray, b: float) -> np.ndarray:
    return np.where(x < 0, 0.5 * np.exp(np.minimum(x, 0) / b), 1.0 - 0.5 * np.exp(-np.maximum(x, 0) / b))


@dataclass(eq=False)
class FactorizedModel:
    """Per-channel discretized Laplacian prior with scales ``b_c``."""

    scales: np.ndarray
    tail_mass: float = 1e-9
    tables: list = field(init=False, repr=False)

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float64).ravel()
        if np.any(~np.isfinite(self.scales)) or np.any(self.scales <= 0):
            raise ValueError("factorized scales must be positive and finite")
        self.tables = [self._table(float(b)) for b in self.scales]

    def _table(self, b: float) -> CodingTable:
        m = int(min(SYMBOL_LIMIT, max(1, math.ceil(b * math.log(1.0 / self.tail_mass)))))
        s = np.arange(-m, m + 1, dtype=np.float64)
        pmf = _laplace_cdf(s + 0.5, b) - _laplace_cdf(s - 0.5, b)
        tail = math.exp(-(m + 0.5) / b)
        return CodingTable(m, pmf, tail)

    @property
    def channels(self) -> int:
        return len(self.tables)

    def bits(self, h_hat: np.ndarray) -> float:
        h_hat = np.asarray(h_hat)
        if h_hat.shape[0] != self.channels:
            raise ValueError(f"hyper latent has {h_hat.shape[0]} channels, model has {self.channels}")
        return float(sum(self.tables[c].bits(h_hat[c]).sum() for c in range(self.channels)))


def scale_table(lo: float = 0.11, hi: float = 256.0, levels: int = 64) -> np.ndarray:
    t = np.exp(np.linspace(math.log(lo), math.log(hi), levels))
    t[0], t[-1] = lo, hi
    return t


@dataclass(eq=False)
class GaussianConditional:
    """Zero-mean discretized Gaussian with per-element scale."""

    sigma_min: float = 0.11
    sigma_max: float = 256.0
    levels: int = 64
    tail_mass: float = 1e-9
    scales: np.ndarray = field(init=False, repr=False)
    tables: list = field(init=False, repr=False)

    def __post_init__(self):
        if self.sigma_min <= 0:
            raise ValueError("sigma_min must be positive")
        self.scales = scale_table(self.sigma_min, self.sigma_max, self.levels)
        z = float(ndtri(1.0 - self.tail_mass / 2))
        self.tables = []
        for sigma in self.scales:
            m = int(min(SYMBOL_LIMIT, max(1, math.ceil(sigma * z))))
            s = np.arange(-m, m + 1, dtype=np.float64)
            a = np.abs(s)
            pmf = ndtr(-(a - 0.5) / sigma) - ndtr(-(a + 0.5) / sigma)
            tail = 2.0 * float(ndtr(-(m + 0.5) / sigma))
            self.tables.append(CodingTable(m, pmf, tail))

    def clamp(self, sigma: np.ndarray) -> np.ndarray:
        return np.maximum(np.asarray(sigma, dtype=np.float64), self.sigma_min)

    def index(self, sigma: np.ndarray) -> np.ndarray:
        """Table index: the smallest tabulated scale >= sigma (clamped to range)."""
        sigma = self.clamp(sigma)
        idx = np.searchsorted(self.scales, sigma, side="left")
        return np.minimum(idx, self.levels - 1).astype(np.int64)

    def bits(self, r_hat: np.ndarray, sigma: np.ndarray) -> float:
        r_hat = np.asarray(r_hat, dtype=np.int64)
        idx = self.index(sigma)
        if idx.shape != r_hat.shape:
            raise ValueError(f"sigma shape {idx.shape} != latent shape {r_hat.shape}")
        total = 0.0
        for t in np.unique(idx):
            sel = idx == t
            total += float(self.tables[t].bits(r_hat[sel]).sum())
        return total


def gaussian_pmf(symbol: int, sigma: float, gc: GaussianConditional | None = None) -> float:
    """P(s) = Phi((s + 1/2) / sigma) - Phi((s - 1/2) / sigma), sigma clamped to sigma_min."""
    if gc is not None:
        sigma = max(sigma, gc.sigma_min)
    a = abs(int(symbol))
    # evaluate on the negative side to avoid cancellation in the upper tail
    lo = 0.5 * math.erfc((a - 0.5) / (sigma * math.sqrt(2.0)))
    hi = 0.5 * math.erfc((a + 0.5) / (sigma * math.sqrt(2.0)))
    return lo - hi
