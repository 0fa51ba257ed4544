"""Scalar quantizers: per-channel gains, a single step size, and step size with
reconstruction offsets, plus differentiable training proxies.

``centroid_offset_oracle`` gives the MSE-optimal offset for a zero-mean
Gaussian source by numeric integration; it is the yardstick the learned
offset network is compared against.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import integrate

from . import gradcore as gc

__all__ = [
    "UniformQuantizerSpec", "GainQuantizerSpec", "QuantResult",
    "quantize_uniform", "dequantize_uniform", "dequantize_with_offset",
    "quantize_gain", "train_proxy", "centroid_offset_oracle", "export_oracle_csv", "write_oracle_csv",
    "OFFSET_TOWARD_ZERO", "OFFSET_LITERAL",
]

OFFSET_TOWARD_ZERO = "toward_zero"
OFFSET_LITERAL = "literal"


@dataclass(frozen=True)
class UniformQuantizerSpec:
    delta: float

    def __post_init__(self):
        _check_delta(self.delta)


@dataclass(frozen=True)
class GainQuantizerSpec:
    gains: np.ndarray
    recon_gains: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=np.float64)
        r = np.asarray(self.recon_gains, dtype=np.float64)
        if g.ndim != 1 or g.shape != r.shape:
            raise ValueError("gains and recon_gains must be 1-D vectors of equal length")
        if not (np.all(g > 0) and np.all(r > 0)):
            raise ValueError("gains must be positive")
        object.__setattr__(self, "gains", g)
        object.__setattr__(self, "recon_gains", r)

    @classmethod
    def from_delta(cls, delta: float, channels: int) -> "GainQuantizerSpec":
        return cls(np.full(channels, 1.0 / delta), np.full(channels, float(delta)))


@dataclass(frozen=True)
class QuantResult:
    indices: np.ndarray
    reconstruction: np.ndarray


def _check_delta(delta) -> None:
    if not (np.all(np.isfinite(delta)) and np.all(np.asarray(delta) > 0)):
        raise ValueError(f"quantization step must be positive and finite, got {delta}")


def _values(y) -> np.ndarray:
    arr = y.data if isinstance(y, gc.Tensor) else np.asarray(y, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("latent contains non-finite values")
    return arr


def quantize_uniform(y, delta) -> np.ndarray:
    """Indices ``round(y / delta)``; numpy rounds half to even."""
    _check_delta(delta)
    return np.rint(_values(y) / delta).astype(np.int64)


def dequantize_uniform(q, delta) -> np.ndarray:
    _check_delta(delta)
    return np.asarray(q, dtype=np.float64) * delta


def dequantize_with_offset(q, delta, offsets, mode: str = OFFSET_TOWARD_ZERO) -> np.ndarray:
    """Reconstruct nonzero bins shifted by ``offsets`` (in units of ``delta``).

    ``toward_zero``: ``(q - sign(q) * offset) * delta`` with offsets in [0, 0.5).
    ``literal``: ``(q + offset) * delta`` with offsets in (-0.5, 0.5).
    The zero bin always reconstructs to 0.
    """
    _check_delta(delta)
    q = np.asarray(q)
    off = np.broadcast_to(np.asarray(offsets, dtype=np.float64), q.shape)
    if not np.isfinite(off).all():
        raise ValueError("offsets contain non-finite values")
    if mode == OFFSET_TOWARD_ZERO:
        if np.any(off < 0) or np.any(off >= 0.5):
            raise ValueError("offsets must lie in [0, 0.5)")
        shift = -np.sign(q) * off
    elif mode == OFFSET_LITERAL:
        if np.any(np.abs(off) >= 0.5):
            raise ValueError("offsets must lie in (-0.5, 0.5)")
        shift = np.where(q != 0, off, 0.0)
    else:
        raise ValueError(f"unknown offset mode {mode!r}")
    return (q + shift) * delta


def quantize_gain(y, spec: GainQuantizerSpec, channel_axis: int = -1) -> QuantResult:
    arr = _values(y)
    if arr.shape[channel_axis] != spec.gains.size:
        raise ValueError(f"latent has {arr.shape[channel_axis]} channels, spec has {spec.gains.size}")
    shape = [1] * arr.ndim
    shape[channel_axis] = -1
    q = np.rint(arr * spec.gains.reshape(shape)).astype(np.int64)
    return QuantResult(q, q * spec.recon_gains.reshape(shape))


def train_proxy(y: gc.Tensor, delta, mode: str = "noise", rng: np.random.Generator | None = None) -> gc.Tensor:
    """Differentiable stand-in for quantize-then-dequantize.

    ``noise`` adds Uniform(-delta/2, delta/2); ``ste`` rounds in the forward
    pass.  Both pass the gradient straight through to ``y``.  ``delta`` may
    be a float or a Tensor; with a Tensor step the ``ste`` branch also
    differentiates through the step (``q*delta`` with ``q`` straight-through).
    """
    y = gc.as_tensor(y)
    dval = delta.data if isinstance(delta, gc.Tensor) else delta
    _check_delta(dval)
    if mode == "noise":
        if rng is None:
            raise ValueError("noise proxy needs a seeded rng")
        u = rng.uniform(-0.5, 0.5, size=y.shape)
        return gc.add(y, gc.mul(delta, u)) if isinstance(delta, gc.Tensor) else gc.add(y, u * delta)
    if mode == "ste":
        if isinstance(delta, gc.Tensor):
            scaled = gc.div(y, delta)
            q = gc.straight_through(scaled, np.rint(scaled.data))
            return gc.mul(q, delta)
        return gc.straight_through(y, np.rint(_values(y) / delta) * delta)
    raise ValueError(f"unknown proxy mode {mode!r}")


def centroid_offset_oracle(sigma: float, delta: float, q: int) -> float:
    """MSE-optimal offset toward zero for bin ``q`` of a N(0, sigma^2) source.

    Returns ``|q| - E[|X| / delta | X in bin q]``.  Only ``sigma / delta``
    matters, so the integrals run in units of ``delta``, and the density is
    rescaled by its value at the inner bin edge so far-tail bins stay
    well-conditioned.
    """
    if not (sigma > 0 and delta > 0):
        raise ValueError("sigma and delta must be positive")
    q = int(q)
    if q == 0:
        raise ValueError("offset is undefined for the zero bin")
    k = abs(q)
    s = sigma / delta
    lo, hi = k - 0.5, k + 0.5

    def weight(x):
        return math.exp(-0.5 * (x * x - lo * lo) / (s * s))

    mass = integrate.quad(weight, lo, hi, epsabs=1e-9, epsrel=1e-12, limit=200)[0]
    log_mass = math.log(mass) - 0.5 * (lo / s) ** 2 - math.log(s * math.sqrt(2 * math.pi)) if mass > 0 else -math.inf
    if log_mass < math.log(1e-300):
        raise ValueError(f"bin probability underflow for sigma={sigma}, delta={delta}, q={q}")
    first = integrate.quad(lambda x: x * weight(x), lo, hi, epsabs=1e-9, epsrel=1e-12, limit=200)[0]
    return k - first / mass


def write_oracle_csv(fh, cells: Iterable[tuple[float, float]], qs: Iterable[int] = (1,)) -> int:
    """Write ``sigma, delta, q, offset`` rows for each ``(sigma, delta)`` cell; returns the row count."""
    w = csv.writer(fh)
    w.writerow(["sigma", "delta", "q", "offset"])
    qs = list(qs)
    rows = 0
    for s, d in cells:
        for q in qs:
            w.writerow([repr(float(s)), repr(float(d)), int(q), repr(centroid_offset_oracle(s, d, q))])
            rows += 1
    return rows


def export_oracle_csv(path, sigmas: Iterable[float], deltas: Iterable[float], qs: Iterable[int] = (1,)) -> int:
    sigmas = list(sigmas)
    with open(path, "w", newline="") as fh:
        return write_oracle_csv(fh, [(s, d) for d in deltas for s in sigmas], qs)
