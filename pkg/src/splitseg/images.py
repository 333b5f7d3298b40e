"""Binary PPM / PGM reading and writing, and the SegMap file format."""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

SEGMAP_MAGIC = b"SSMP"
SEGMAP_VERSION = 1
_DIMS = struct.Struct("<II")
_PNM_HEADER = re.compile(rb"\A(P[56])\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s")


def read_pnm(data: bytes) -> tuple[np.ndarray, int]:
    """Raw P6/P5 bytes -> (pixels of shape (H, W, 3) or (H, W), maxval)."""
    m = _PNM_HEADER.match(data)
    if not m:
        raise ValueError("not a binary PPM (P6) or PGM (P5) file")
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if not 0 < maxval < 65536:
        raise ValueError(f"invalid maxval {maxval}")
    channels = 3 if kind == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = h * w * channels
    body = data[m.end():]
    if len(body) < n * dtype.itemsize:
        raise ValueError(f"pixel data truncated: need {n * dtype.itemsize} bytes, got {len(body)}")
    a = np.frombuffer(body, dtype, n).reshape((h, w, channels) if channels == 3 else (h, w))
    return a.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_pnm(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.dtype != np.uint8:
        raise ValueError("only 8-bit images are written")
    if a.ndim == 3 and a.shape[2] == 3:
        kind = b"P6"
    elif a.ndim == 2:
        kind = b"P5"
    else:
        raise ValueError(f"cannot write array of shape {a.shape}")
    return kind + b"\n%d %d\n255\n" % (a.shape[1], a.shape[0]) + a.tobytes()


def load_image(path) -> np.ndarray:
    """PPM/PGM file -> float32 (C, H, W) normalized to [0, 1]."""
    a, maxval = read_pnm(Path(path).read_bytes())
    x = a.astype(np.float32) / np.float32(maxval)
    if x.ndim == 2:
        x = np.repeat(x[None], 3, axis=0)
    else:
        x = x.transpose(2, 0, 1)
    return np.ascontiguousarray(x)


def save_image(path, x: np.ndarray) -> None:
    """(3, H, W) in [0, 1] -> P6 file."""
    a = np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(write_pnm(np.ascontiguousarray(a)))


def load_labels(path) -> np.ndarray:
    """PGM ground-truth label map -> int32 (H, W); pixel values are the labels."""
    a, _ = read_pnm(Path(path).read_bytes())
    if a.ndim != 2:
        raise ValueError("label maps must be single-channel PGM")
    return a.astype(np.int32)


# -- SegMap --------------------------------------------------------------------

def segmap_to_wire(m: np.ndarray) -> bytes:
    """H, W as u32 then one u8 per pixel, row-major."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"segmentation map must be 2-D, got {m.shape}")
    if m.size and (m.min() < 0 or m.max() > 255):
        raise ValueError("labels must fit in one byte")
    return _DIMS.pack(*m.shape) + m.astype(np.uint8).tobytes()


def segmap_from_wire(buf: bytes) -> np.ndarray:
    if len(buf) < _DIMS.size:
        raise ValueError("segmentation map reply shorter than its header")
    h, w = _DIMS.unpack_from(buf)
    if len(buf) != _DIMS.size + h * w:
        raise ValueError(f"segmentation map {h}x{w} needs {h * w} pixel bytes, got {len(buf) - _DIMS.size}")
    return np.frombuffer(buf, np.uint8, h * w, _DIMS.size).reshape(h, w).astype(np.int32)


def segmap_to_bytes(m: np.ndarray) -> bytes:
    return SEGMAP_MAGIC + struct.pack("<H", SEGMAP_VERSION) + segmap_to_wire(m)


def segmap_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != SEGMAP_MAGIC:
        raise ValueError("not a segmentation map file (bad magic)")
    if len(buf) < 6:
        raise ValueError("truncated segmentation map file")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != SEGMAP_VERSION:
        raise ValueError(f"unsupported segmentation map version {version}")
    return segmap_from_wire(buf[6:])


def save_segmap(path, m: np.ndarray) -> None:
    Path(path).write_bytes(segmap_to_bytes(m))


def load_segmap(path) -> np.ndarray:
    return segmap_from_bytes(Path(path).read_bytes())
