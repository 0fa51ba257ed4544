"""Pure-Python range coder kernel (fallback for the compiled ``_rc_ext``).

Carry-propagating byte-oriented range coder: 32-bit range, renormalised a
byte at a time once it drops below 2**24, symbol frequencies summing to
2**16.  See docs/formats.md for the byte-level description.
"""
from __future__ import annotations

import numpy as np

FREQ_BITS = 16
TOTAL = 1 << FREQ_BITS
TOP = 1 << 24
MASK32 = 0xFFFFFFFF


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self.finished = False

    def _shift_low(self):
        low = self.low
        if (low & MASK32) < 0xFF000000 or low > MASK32:
            carry = low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, starts, freqs) -> None:
        if self.finished:
            raise RuntimeError("encoder already finished")
        for start, freq in zip(np.asarray(starts).tolist(), np.asarray(freqs).tolist()):
            r = self.range >> FREQ_BITS
            self.low += start * r
            if start + freq < TOTAL:
                self.range = freq * r
            else:
                self.range -= start * r
            while self.range < TOP:
                self.range = (self.range << 8) & MASK32
                self._shift_low()

    def finish(self) -> bytes:
        if not self.finished:
            for _ in range(5):
                self._shift_low()
            self.finished = True
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(5):
            self.code = ((self.code << 8) | self._byte()) & MASK32

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise EOFError("range decoder ran past the end of the payload")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, cum) -> np.ndarray:
        """Decode one symbol per row of the cumulative-frequency table ``cum``."""
        cum = np.asarray(cum)
        n, width = cum.shape
        out = np.empty(n, dtype=np.int64)
        rows = cum.tolist()
        for i in range(n):
            row = rows[i]
            r = self.range >> FREQ_BITS
            v = self.code // r
            if v >= TOTAL:
                v = TOTAL - 1
            lo, hi = 0, width - 1
            while hi - lo > 1:
                mid = (lo + hi) >> 1
                if row[mid] <= v:
                    lo = mid
                else:
                    hi = mid
            start = row[lo]
            freq = row[lo + 1] - start
            self.code -= start * r
            if start + freq < TOTAL:
                self.range = freq * r
            else:
                self.range -= start * r
            while self.range < TOP:
                self.code = ((self.code << 8) | self._byte()) & MASK32
                self.range = (self.range << 8) & MASK32
            out[i] = lo
        return out

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.data)
