# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled range coder kernel; byte-for-byte identical to ``_rc_py``."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint8_t, uint32_t, uint64_t, int64_t

cnp.import_array()

DEF FREQ_BITS = 16
DEF TOTAL = 65536
DEF TOP = 16777216

FREQ_BITS_PY = FREQ_BITS
TOTAL_PY = TOTAL


cdef class RangeEncoder:
    cdef uint64_t low
    cdef uint32_t rng
    cdef uint32_t cache
    cdef uint64_t cache_size
    cdef bytearray out
    cdef bint finished

    def __cinit__(self):
        self.low = 0
        self.rng = 0xFFFFFFFF
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self.finished = False

    cdef inline void _shift_low(self):
        cdef uint32_t carry, temp
        if <uint32_t>self.low < 0xFF000000 or self.low > 0xFFFFFFFF:
            carry = <uint32_t>(self.low >> 32)
            temp = self.cache
            while True:
                self.out.append(<uint8_t>((temp + carry) & 0xFF))
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = <uint32_t>((self.low >> 24) & 0xFF)
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, starts, freqs):
        if self.finished:
            raise RuntimeError("encoder already finished")
        cdef int64_t[::1] s = np.ascontiguousarray(starts, dtype=np.int64)
        cdef int64_t[::1] f = np.ascontiguousarray(freqs, dtype=np.int64)
        cdef Py_ssize_t i, n = s.shape[0]
        cdef uint32_t r
        for i in range(n):
            r = self.rng >> FREQ_BITS
            self.low += <uint64_t>s[i] * r
            if s[i] + f[i] < TOTAL:
                self.rng = <uint32_t>(f[i] * r)
            else:
                self.rng -= <uint32_t>(s[i] * r)
            while self.rng < TOP:
                self.rng <<= 8
                self._shift_low()

    def finish(self):
        cdef int k
        if not self.finished:
            for k in range(5):
                self._shift_low()
            self.finished = True
        return bytes(self.out)


cdef class RangeDecoder:
    cdef bytes data
    cdef const uint8_t* buf
    cdef Py_ssize_t n_bytes
    cdef Py_ssize_t pos
    cdef uint32_t rng
    cdef uint32_t code

    def __init__(self, data):
        self.data = bytes(data)
        self.buf = <const uint8_t*>self.data
        self.n_bytes = len(self.data)
        self.pos = 0
        self.rng = 0xFFFFFFFF
        self.code = 0
        cdef int k
        for k in range(5):
            self.code = (self.code << 8) | self._byte()

    cdef inline uint32_t _byte(self) except? 0xFFFFFFFF:
        if self.pos >= self.n_bytes:
            raise EOFError("range decoder ran past the end of the payload")
        self.pos += 1
        return self.buf[self.pos - 1]

    def decode(self, cum):
        cdef int64_t[:, ::1] c = np.ascontiguousarray(cum, dtype=np.int64)
        cdef Py_ssize_t n = c.shape[0], width = c.shape[1]
        out_arr = np.empty(n, dtype=np.int64)
        cdef int64_t[::1] out = out_arr
        cdef Py_ssize_t i, lo, hi, mid
        cdef uint32_t r, v, start, freq
        for i in range(n):
            r = self.rng >> FREQ_BITS
            v = self.code // r
            if v >= TOTAL:
                v = TOTAL - 1
            lo = 0
            hi = width - 1
            while hi - lo > 1:
                mid = (lo + hi) >> 1
                if c[i, mid] <= v:
                    lo = mid
                else:
                    hi = mid
            start = <uint32_t>c[i, lo]
            freq = <uint32_t>(c[i, lo + 1] - c[i, lo])
            self.code -= start * r
            if start + freq < TOTAL:
                self.rng = freq * r
            else:
                self.rng -= start * r
            while self.rng < TOP:
                self.code = (self.code << 8) | self._byte()
                self.rng <<= 8
            out[i] = lo
        return out_arr

    @property
    def exhausted(self):
        return self.pos == self.n_bytes
