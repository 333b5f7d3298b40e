"""Car-to-cloud harness: framing, socket server and client, channel accounting.

Every message on the wire is ``length u32 LE | tag u8 | payload`` where the
length counts the payload only. The car sends one bitstream frame per image
and the cloud answers with one segmentation-map frame, or an error frame
whose payload is a UTF-8 diagnostic.
"""

from __future__ import annotations

import logging
import os
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import Bitstream, DecodeError
from .images import segmap_from_wire, segmap_to_wire
from .pipeline import DISTRIBUTED_BASELINE, DISTRIBUTED_JD, TOPOLOGIES, SplitModel, check_image

log = logging.getLogger(__name__)

TAG_BITSTREAM = 1
TAG_SEGMAP = 2
TAG_ERROR = 3
TAGS = (TAG_BITSTREAM, TAG_SEGMAP, TAG_ERROR)
MAX_FRAME = 256 * 1024 * 1024
_PREFIX = struct.Struct("<IB")
FRAME_OVERHEAD = _PREFIX.size
ADDR_ENV = "SPLITSEG_ADDR"
DEFAULT_ADDR = "127.0.0.1:5051"


class TransportError(Exception):
    """Connection or protocol failure. ``kind`` is one of connect, protocol, remote."""

    def __init__(self, message: str, kind: str = "protocol"):
        super().__init__(message)
        self.kind = kind


class FrameError(TransportError):
    pass


# -- framing ------------------------------------------------------------------------

def frame(payload: bytes, tag: int = TAG_BITSTREAM, max_size: int = MAX_FRAME) -> bytes:
    if tag not in TAGS:
        raise FrameError(f"unknown frame tag {tag}")
    if len(payload) > max_size:
        raise FrameError(f"payload of {len(payload)} bytes exceeds limit {max_size}")
    return _PREFIX.pack(len(payload), tag) + bytes(payload)


def unframe(buf: bytes, max_size: int = MAX_FRAME) -> tuple[int, bytes]:
    """Exact inverse of :func:`frame` for one complete frame."""
    if len(buf) < FRAME_OVERHEAD:
        raise FrameError(f"frame truncated: {len(buf)} bytes, prefix needs {FRAME_OVERHEAD}")
    n, tag = _PREFIX.unpack_from(buf)
    if tag not in TAGS:
        raise FrameError(f"unknown frame tag {tag}")
    if n > max_size:
        raise FrameError(f"declared length {n} exceeds limit {max_size}")
    if len(buf) != FRAME_OVERHEAD + n:
        raise FrameError(f"declared length {n}, frame carries {len(buf) - FRAME_OVERHEAD}")
    return tag, bytes(buf[FRAME_OVERHEAD:])


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks, got = [], 0
    while got < n:
        part = sock.recv(min(n - got, 1 << 20))
        if not part:
            return None
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def recv_frame(sock: socket.socket, max_size: int = MAX_FRAME) -> tuple[int, bytes] | None:
    """Next frame from ``sock``; None on a clean EOF before any prefix byte."""
    head = _recv_exact(sock, FRAME_OVERHEAD)
    if head is None:
        return None
    n, tag = _PREFIX.unpack(head)
    if n > max_size:
        raise FrameError(f"declared length {n} exceeds limit {max_size}")
    body = _recv_exact(sock, n)
    if body is None:
        raise FrameError(f"connection closed inside a {n}-byte frame")
    if tag not in TAGS:
        raise FrameError(f"unknown frame tag {tag}")
    return tag, body


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = str(addr).rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 <= int(port) < 65536:
        raise ValueError(f"invalid address {addr!r}, expected HOST:PORT")
    return host.strip("[]"), int(port)


# -- session --------------------------------------------------------------------------

@dataclass(frozen=True)
class SessionConfig:
    topology: str
    weights: str | Path | None = None
    addr: str | None = None
    include_header: bool = True
    max_frame: int = MAX_FRAME
    timeout: float = 60.0

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}; choose from {TOPOLOGIES}")

    @property
    def distributed(self) -> bool:
        return self.topology in (DISTRIBUTED_BASELINE, DISTRIBUTED_JD)

    @property
    def endpoint(self) -> tuple[str, int]:
        return parse_addr(self.addr or os.environ.get(ADDR_ENV, DEFAULT_ADDR))


@dataclass(frozen=True)
class ChannelStats:
    """Bytes the car transmitted for one image.

    ``bytes_sent`` is the serialized bitstream (header + payload). The
    5-byte frame prefix is transport plumbing and reported separately.
    """

    height: int
    width: int
    bytes_sent: int = 0
    header_bytes: int = 0
    payload_bytes: int = 0
    frame_bytes: int = 0
    include_header: bool = True

    @property
    def bits(self) -> int:
        return 8 * (self.bytes_sent if self.include_header else self.payload_bytes)

    @property
    def bpp(self) -> float:
        return self.bits / (self.height * self.width)

    @classmethod
    def for_stream(cls, stream: Bitstream, include_header: bool = True) -> "ChannelStats":
        return cls(stream.height, stream.width, len(stream), stream.header_bytes,
                   stream.payload_bytes, FRAME_OVERHEAD, include_header)

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "bytes_sent": self.bytes_sent,
            "header_bytes": self.header_bytes,
            "payload_bytes": self.payload_bytes,
            "frame_bytes": self.frame_bytes,
            "include_header": self.include_header,
            "bpp": self.bpp,
        }


def request(endpoint: tuple[str, int], stream: Bitstream | bytes, *, timeout: float = 60.0,
            max_frame: int = MAX_FRAME) -> np.ndarray:
    """Send one bitstream frame and return the decoded segmentation map."""
    raw = stream.to_bytes() if isinstance(stream, Bitstream) else bytes(stream)
    try:
        sock = socket.create_connection(endpoint, timeout=timeout)
    except OSError as exc:
        raise TransportError(f"cannot connect to {endpoint[0]}:{endpoint[1]}: {exc}", "connect") from None
    with sock:
        try:
            sock.sendall(frame(raw, TAG_BITSTREAM, max_frame))
            reply = recv_frame(sock, max_frame)
        except OSError as exc:
            raise TransportError(f"connection failed: {exc}", "connect") from None
    if reply is None:
        raise TransportError("server closed the connection without replying")
    tag, body = reply
    if tag == TAG_ERROR:
        raise TransportError(body.decode("utf-8", "replace"), "remote")
    if tag != TAG_SEGMAP:
        raise TransportError(f"expected a segmentation map frame, got tag {tag}")
    try:
        return segmap_from_wire(body)
    except ValueError as exc:
        raise TransportError(str(exc)) from None


def run_client(cfg: SessionConfig, x: np.ndarray, model: SplitModel | None = None):
    """Run one image through the configured topology: ``(ChannelStats, map)``."""
    x = np.asarray(x, dtype=np.float32)
    check_image(x)
    if model is None:
        if cfg.weights is None:
            raise ValueError("session has neither a model nor a weights path")
        model = SplitModel.load(cfg.weights)
    if not model.supports(cfg.topology):
        raise ValueError(f"weights are {model.config.variant}, topology {cfg.topology} needs the other variant")
    h, w = x.shape[1:]
    if not cfg.distributed:
        _, m = model.in_car(x)
        return ChannelStats(h, w, include_header=cfg.include_header), m
    stream = model.car_encode(x).stream
    m = request(cfg.endpoint, stream, timeout=cfg.timeout, max_frame=cfg.max_frame)
    if m.shape != (h, w):
        raise TransportError(f"reply map is {m.shape}, image is {(h, w)}")
    return ChannelStats.for_stream(stream, cfg.include_header), m


# -- server ---------------------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server: SegServer = self.server.owner
        sock = self.request
        while True:
            try:
                got = recv_frame(sock, server.max_frame)
            except FrameError as exc:
                # the stream cannot be resynchronized after a bad prefix
                self._send(TAG_ERROR, str(exc).encode())
                return
            except OSError:
                return
            if got is None:
                return
            tag, body = self._serve_one(server, *got)
            if not self._send(tag, body):
                return

    def _serve_one(self, server: "SegServer", tag: int, body: bytes) -> tuple[int, bytes]:
        if tag != TAG_BITSTREAM:
            return TAG_ERROR, f"expected a bitstream frame, got tag {tag}".encode()
        try:
            return TAG_SEGMAP, segmap_to_wire(server.segment(body))
        except (DecodeError, ValueError) as exc:
            log.info("rejected request: %s", exc)
            return TAG_ERROR, str(exc).encode()

    def _send(self, tag: int, body: bytes) -> bool:
        try:
            self.request.sendall(frame(body, tag, MAX_FRAME))
            return True
        except OSError:
            return False


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class SegServer:
    """Cloud endpoint: bitstream in, segmentation map out.

    Use as a context manager to serve from a background thread; bind port 0
    to let the OS pick one and read it back from :attr:`address`.
    """

    def __init__(self, model: SplitModel, addr: str | tuple[str, int] = ("127.0.0.1", 0),
                 max_frame: int = MAX_FRAME):
        if isinstance(addr, str):
            addr = parse_addr(addr)
        self.model = model
        self.max_frame = max_frame
        self._server = _TCPServer(addr, _Handler)
        self._server.owner = self
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def segment(self, raw: bytes) -> np.ndarray:
        return self.model.cloud(Bitstream.from_bytes(raw))[1]

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def start(self) -> "SegServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def close(self) -> None:
        if self._thread is not None:
            self._server.shutdown()
            self._thread.join()
            self._thread = None
        self._server.server_close()

    def __enter__(self) -> "SegServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()


def run_server(cfg: SessionConfig, model: SplitModel | None = None) -> None:
    """Blocking serving loop for a distributed topology."""
    if model is None:
        model = SplitModel.load(cfg.weights)
    if not model.supports(cfg.topology):
        raise ValueError(f"weights are {model.config.variant}, cannot serve {cfg.topology}")
    server = SegServer(model, cfg.endpoint, cfg.max_frame)
    log.info("serving %s on %s:%d", cfg.topology, *server.address)
    try:
        server.serve_forever()
    finally:
        server.close()
