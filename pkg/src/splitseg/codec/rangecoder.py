"""Integer-only range coder (LZMA-style carry handling, 16-bit frequencies).

State: 64-bit ``low`` (33 significant bits incl. carry), 32-bit ``range``.
Every symbol is described by ``(cum, freq)`` with ``sum(freq) == 1 << 16``.
The always-zero leading cache byte of the classic scheme is not emitted.
"""

from __future__ import annotations

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._pending = 1
        self._out = bytearray()

    def encode(self, cum: int, freq: int) -> None:
        r = self.range >> PRECISION
        self.low += r * cum
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bit(self, bit: int) -> None:
        half = TOTAL >> 1
        self.encode(half if bit else 0, half)

    def _shift_low(self) -> None:
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            byte = self._cache
            out = self._out
            while self._pending:
                out.append((byte + carry) & 0xFF)
                byte = 0xFF
                self._pending -= 1
            self._cache = (low >> 24) & 0xFF
        self._pending += 1
        self.low = (low << 8) & _MASK32

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self._out[1:])


class RangeDecoder:
    """Mirror of :class:`RangeEncoder`. Reads past the end as zero bytes."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 4
        head = data[:4].ljust(4, b"\0")
        self.code = int.from_bytes(head, "big")
        self.range = _MASK32
        self._r = 0

    def target(self) -> int:
        """Cumulative-frequency value of the next symbol (call before :meth:`update`)."""
        self._r = self.range >> PRECISION
        v = self.code // self._r
        return v if v < TOTAL else TOTAL - 1

    def update(self, cum: int, freq: int) -> None:
        r = self._r
        self.code -= r * cum
        self.range = r * freq
        while self.range < _TOP:
            pos = self._pos
            byte = self._data[pos] if pos < len(self._data) else 0
            self._pos = pos + 1
            self.code = ((self.code << 8) | byte) & _MASK32
            self.range <<= 8

    def decode_bit(self) -> int:
        half = TOTAL >> 1
        bit = 1 if self.target() >= half else 0
        self.update(half if bit else 0, half)
        return bit

    @property
    def overrun(self) -> int:
        """Bytes consumed beyond the end of the input."""
        return max(0, self._pos - len(self._data))
