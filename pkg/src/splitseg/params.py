"""Seeded weight initialization and the SSJD weight container.

Every parameter tensor is drawn from its own PCG64 stream, keyed by the
global seed and a CRC32 of the parameter name, so adding or removing a layer
never perturbs the values of the others.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .tensor import DTYPE, BatchNormSpec, ConvSpec

CONTAINER_MAGIC = b"SSJD"
CONTAINER_VERSION = 1


class Params(dict):
    """Flat ``name -> float32 array`` mapping with a few layer helpers."""

    def conv(self, name: str, *, stride: int = 1, padding: int | None = None, groups: int = 1,
             transposed: bool = False) -> ConvSpec:
        w = self[f"{name}.weight"]
        if padding is None:
            padding = w.shape[2] // 2
        return ConvSpec(
            weight=w,
            bias=self.get(f"{name}.bias"),
            stride=stride,
            padding=padding,
            groups=groups,
            transposed=transposed,
            output_padding=stride - 1 if transposed else 0,
        )

    def bn(self, name: str) -> BatchNormSpec:
        return BatchNormSpec(
            mean=self[f"{name}.mean"],
            var=self[f"{name}.var"],
            gamma=self[f"{name}.gamma"],
            beta=self[f"{name}.beta"],
        )

    def subset(self, prefix: str) -> "Params":
        return Params({k: v for k, v in self.items() if k.startswith(prefix)})

    def trainable_count(self) -> int:
        """Parameter count excluding batchnorm running statistics."""
        return sum(v.size for k, v in self.items() if not k.endswith((".mean", ".var")))

    def checksum(self, prefix: str | tuple = "") -> int:
        crc = 0
        for k in sorted(self):
            if k.startswith(prefix):
                crc = zlib.crc32(k.encode(), crc)
                crc = zlib.crc32(np.asarray(self[k], dtype="<f4").tobytes(), crc)
        return crc


class Initializer:
    """Fills a :class:`Params` dict deterministically from one integer seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.params = Params()

    def _rng(self, name: str) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(zlib.crc32(name.encode()),))
        return np.random.Generator(np.random.PCG64(ss))

    def uniform(self, name: str, shape, bound: float) -> np.ndarray:
        a = self._rng(name).uniform(-bound, bound, size=shape).astype(DTYPE)
        self.params[name] = a
        return a

    def conv(self, name: str, cin: int, cout: int, k: int, *, groups: int = 1,
             transposed: bool = False, bias: bool = True) -> None:
        if transposed:
            shape = (cin, cout // groups, k, k)
        else:
            shape = (cout, cin // groups, k, k)
        fan_in = (cin // groups) * k * k
        bound = 1.0 / np.sqrt(fan_in)
        self.uniform(f"{name}.weight", shape, bound)
        if bias:
            self.uniform(f"{name}.bias", (cout,), bound)

    def linear(self, name: str, din: int, dout: int) -> None:
        bound = 1.0 / np.sqrt(din)
        self.uniform(f"{name}.weight", (din, dout), bound)
        self.uniform(f"{name}.bias", (dout,), bound)

    def bn(self, name: str, c: int) -> None:
        self.params[f"{name}.mean"] = np.zeros(c, DTYPE)
        self.params[f"{name}.var"] = np.ones(c, DTYPE)
        self.params[f"{name}.gamma"] = np.ones(c, DTYPE)
        self.params[f"{name}.beta"] = np.zeros(c, DTYPE)

    def const(self, name: str, value: np.ndarray) -> None:
        self.params[name] = np.asarray(value, dtype=DTYPE)


# -- container ----------------------------------------------------------------

def container_to_bytes(params: dict) -> bytes:
    out = bytearray(CONTAINER_MAGIC)
    out += struct.pack("<HI", CONTAINER_VERSION, len(params))
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f4")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes(order="C")
    return bytes(out)


def container_from_bytes(buf: bytes) -> Params:
    if buf[:4] != CONTAINER_MAGIC:
        raise ValueError("not a weight container (bad magic)")
    if len(buf) < 10:
        raise ValueError("truncated weight container header")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != CONTAINER_VERSION:
        raise ValueError(f"unsupported weight container version {version}")
    off = 10
    params = Params()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if off + 4 * size > len(buf):
                raise ValueError(f"entry {name!r}: payload truncated")
            if name in params:
                raise ValueError(f"duplicate entry {name!r}")
            params[name] = np.frombuffer(buf, "<f4", size, off).astype(DTYPE).reshape(dims)
            off += 4 * size
    except struct.error as exc:
        raise ValueError(f"truncated weight container: {exc}") from None
    if off != len(buf):
        raise ValueError(f"{len(buf) - off} trailing bytes after last entry")
    return params


def save_params(path, params: dict) -> None:
    Path(path).write_bytes(container_to_bytes(params))


def load_params(path) -> Params:
    return container_from_bytes(Path(path).read_bytes())
