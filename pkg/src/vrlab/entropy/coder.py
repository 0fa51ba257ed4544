"""Entropy coding of quantization indices against a bin-probability model.

Each coded element gets its own frequency table, quantized from the model
CDF over the alphabet ``[qmin, qmax]`` (stored in the stream header).  The
outermost symbols absorb the tail mass and every symbol keeps a frequency of
at least one, so any index in the alphabet is codable.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import _rc_py
from .densities import FactorizedModel, GaussianCond

try:
    if os.environ.get("VRLAB_PURE_PYTHON"):
        raise ImportError("pure-python backend forced")
    from . import _rc_ext as _kernel
    BACKEND = "cython"
except ImportError:
    _kernel = _rc_py
    BACKEND = "python"

FREQ_BITS = 16
TOTAL = 1 << FREQ_BITS
MAX_ALPHABET = TOTAL // 4
TABLE_CELLS = 1 << 21

STREAM_MAGIC = b"VRBS"
STREAM_VERSION = 1
_HEADER = struct.Struct("<4sBBB")


class CoderError(RuntimeError):
    """Model/alphabet cannot be represented at the coder's frequency precision."""


class StreamError(ValueError):
    """Bitstream header or payload is corrupt or does not match the decoder setup."""


def kernels(backend: str | None = None):
    """Return the (encoder, decoder) classes for ``backend`` ('cython' or 'python')."""
    if backend is None:
        mod = _kernel
    elif backend == "python":
        mod = _rc_py
    elif backend == "cython":
        from . import _rc_ext as mod
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return mod.RangeEncoder, mod.RangeDecoder


@dataclass(frozen=True)
class Bitstream:
    shape: tuple[int, ...]
    delta: float
    qmin: int
    qmax: int
    kind: int
    payload: bytes

    @property
    def payload_bits(self) -> int:
        return 8 * len(self.payload)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(STREAM_MAGIC, STREAM_VERSION, self.kind, len(self.shape))
        head += struct.pack(f"<{len(self.shape)}I", *self.shape)
        head += struct.pack("<diiI", self.delta, self.qmin, self.qmax, len(self.payload))
        return head + self.payload

    @property
    def nbytes(self) -> int:
        return len(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> tuple["Bitstream", int]:
        """Parse one stream from the start of ``buf``; returns it and bytes consumed."""
        try:
            magic, version, kind, ndim = _HEADER.unpack_from(buf, 0)
            if magic != STREAM_MAGIC:
                raise StreamError("bad stream magic")
            if version != STREAM_VERSION:
                raise StreamError(f"unsupported stream version {version}")
            pos = _HEADER.size
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            delta, qmin, qmax, n = struct.unpack_from("<diiI", buf, pos)
            pos += struct.calcsize("<diiI")
        except struct.error as exc:
            raise StreamError("truncated stream header") from exc
        if pos + n > len(buf):
            raise StreamError("truncated stream payload")
        if qmax < qmin or not np.isfinite(delta) or delta <= 0:
            raise StreamError("inconsistent stream header")
        return cls(tuple(shape), float(delta), qmin, qmax, kind, bytes(buf[pos:pos + n])), pos + n


def _quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Integer frequencies >= 1 summing to TOTAL per row, as cumulative table."""
    n, k = pmf.shape
    freq = np.floor(pmf * (TOTAL - k)).astype(np.int64) + 1
    deficit = TOTAL - freq.sum(axis=1)
    freq[np.arange(n), np.argmax(pmf, axis=1)] += deficit
    cum = np.zeros((n, k + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cum[:, 1:])
    return cum


def cdf_tables(model, shape, delta: float, qmin: int, qmax: int):
    """Yield ``(row_slice, cum)`` chunks of per-element cumulative tables."""
    k = qmax - qmin + 1
    if k > MAX_ALPHABET:
        raise CoderError(f"alphabet of {k} symbols exceeds {MAX_ALPHABET} at {FREQ_BITS}-bit precision")
    loc, scale = model.loc_scale(shape)
    edges = (np.arange(qmin, qmax + 2, dtype=np.float64) - 0.5) * delta
    step = max(1, TABLE_CELLS // (k + 1))
    n = loc.size
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        cdf = model.cdf_np((edges[None, :] - loc[lo:hi, None]) / scale[lo:hi, None])
        cdf[:, 0] = 0.0
        cdf[:, -1] = 1.0
        pmf = np.maximum(np.diff(cdf, axis=1), 0.0)
        total = pmf.sum(axis=1, keepdims=True)
        if not np.all(total > 0) or not np.isfinite(pmf).all():
            raise CoderError("model probabilities underflow on the coding alphabet")
        yield slice(lo, hi), _quantize_pmf(pmf / total)


def _model_kind(model) -> int:
    if isinstance(model, (GaussianCond, FactorizedModel)):
        return model.kind
    raise TypeError(f"unsupported entropy model {type(model).__name__}")


def range_encode(q, model, delta: float, backend: str | None = None) -> Bitstream:
    q = np.asarray(q)
    if not np.issubdtype(q.dtype, np.integer):
        raise TypeError("indices must be integers")
    kind = _model_kind(model)
    flat = q.reshape(-1).astype(np.int64)
    qmin = int(flat.min()) if flat.size else 0
    qmax = int(flat.max()) if flat.size else 0
    enc_cls, _ = kernels(backend)
    enc = enc_cls()
    for rows, cum in cdf_tables(model, q.shape, float(delta), qmin, qmax):
        sym = flat[rows] - qmin
        idx = np.arange(sym.size)
        enc.encode(cum[idx, sym], cum[idx, sym + 1] - cum[idx, sym])
    return Bitstream(tuple(q.shape), float(delta), qmin, qmax, kind, enc.finish())


def range_decode(bs: Bitstream, model, delta: float, backend: str | None = None) -> np.ndarray:
    kind = _model_kind(model)
    if bs.kind != kind:
        raise StreamError("stream was coded with a different model family")
    if bs.delta != float(delta):
        raise StreamError(f"stream step {bs.delta} does not match decoder step {delta}")
    _, dec_cls = kernels(backend)
    try:
        dec = dec_cls(bs.payload)
        out = np.empty(int(np.prod(bs.shape, dtype=np.int64)), dtype=np.int64)
        for rows, cum in cdf_tables(model, bs.shape, float(delta), bs.qmin, bs.qmax):
            out[rows] = dec.decode(cum) + bs.qmin
    except EOFError as exc:
        raise StreamError(str(exc)) from exc
    if not dec.exhausted:
        raise StreamError("payload has trailing bytes")
    return out.reshape(bs.shape)
