"""Bin-probability models for quantization indices and the rate estimate."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .. import gradcore as gc

SIGMA_MIN = 1e-4
P_MIN = 2.0 ** -32

GAUSSIAN = 0
LOGISTIC = 1


@dataclass
class GaussianCond:
    """Per-element Gaussian with mean ``mu`` and scale ``sigma``.

    ``sigma`` is clamped to ``SIGMA_MIN`` on construction; both fields may be
    Tensors so rates stay differentiable.
    """

    mu: gc.Tensor | np.ndarray | float
    sigma: gc.Tensor | np.ndarray | float

    kind = GAUSSIAN

    def __post_init__(self):
        self.mu = gc.as_tensor(self.mu)
        self.sigma = gc.clamp_min(gc.as_tensor(self.sigma), SIGMA_MIN)
        _finite(self.mu, "mu")
        _finite(self.sigma, "sigma")

    @staticmethod
    def _cdf_t(x: gc.Tensor) -> gc.Tensor:
        return gc.normal_cdf(x)

    @staticmethod
    def cdf_np(x: np.ndarray) -> np.ndarray:
        return ndtr(x)

    def loc_scale(self, shape) -> tuple[np.ndarray, np.ndarray]:
        return (np.broadcast_to(self.mu.data, shape).reshape(-1),
                np.broadcast_to(self.sigma.data, shape).reshape(-1))

    def _loc(self):
        return self.mu

    def _scale(self):
        return self.sigma


@dataclass
class FactorizedModel:
    """Per-channel logistic density (channel is the last axis).

    ``loc`` and ``log_scale`` are trainable Tensors of shape (C,).
    """

    loc: gc.Tensor
    log_scale: gc.Tensor

    kind = LOGISTIC

    @classmethod
    def init(cls, channels: int, scale: float = 1.0, prefix: str = "factorized") -> "FactorizedModel":
        return cls(gc.Tensor(np.zeros(channels), requires_grad=True, name=f"{prefix}.loc"),
                   gc.Tensor(np.full(channels, math.log(scale)), requires_grad=True, name=f"{prefix}.log_scale"))

    @property
    def channels(self) -> int:
        return self.loc.shape[0]

    @staticmethod
    def _cdf_t(x: gc.Tensor) -> gc.Tensor:
        return gc.sigmoid(x)

    @staticmethod
    def cdf_np(x: np.ndarray) -> np.ndarray:
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    def loc_scale(self, shape) -> tuple[np.ndarray, np.ndarray]:
        _finite(self.loc, "loc")
        _finite(self.log_scale, "log_scale")
        return (np.broadcast_to(self.loc.data, shape).reshape(-1),
                np.broadcast_to(np.exp(self.log_scale.data), shape).reshape(-1))

    def _loc(self):
        return self.loc

    def _scale(self):
        return gc.exp(self.log_scale)


def _finite(t: gc.Tensor, what: str) -> None:
    if not np.isfinite(t.data).all():
        raise ValueError(f"entropy model parameter {what} is not finite")


def bin_probability(model, q, delta) -> gc.Tensor:
    """Mass of the model density on ``[(q - 1/2) delta, (q + 1/2) delta)``.

    ``q`` may be an integer array (coding) or a continuous Tensor (training
    with noisy indices); ``delta`` a float or a scalar Tensor.  The symmetric
    form evaluates the bin on the near side of the location, which keeps
    tail probabilities accurate.  Result is floored at ``P_MIN``.
    """
    dval = delta.data if isinstance(delta, gc.Tensor) else np.asarray(delta)
    if not np.all(dval > 0):
        raise ValueError("delta must be positive")
    if isinstance(model, FactorizedModel):
        _finite(model.loc, "loc")
        _finite(model.log_scale, "log_scale")
    q = q if isinstance(q, gc.Tensor) else gc.Tensor(np.asarray(q, dtype=np.float64))
    centre = gc.abs_(gc.sub(gc.mul(q, delta), model._loc()))
    half = gc.mul(delta, 0.5)
    scale = model._scale()
    upper = model._cdf_t(gc.div(gc.sub(half, centre), scale))
    lower = model._cdf_t(gc.div(gc.sub(gc.neg(half), centre), scale))
    return gc.clamp_min(gc.sub(upper, lower), P_MIN)


def rate_bits(p) -> gc.Tensor:
    """Information content ``sum(-log2 p)`` in bits."""
    p = gc.as_tensor(p)
    if np.any(p.data <= 0) or np.any(p.data > 1 + 1e-12):
        raise ValueError("probabilities must lie in (0, 1]")
    return gc.mul(gc.reduce_sum(gc.log(p)), -1.0 / math.log(2.0))


def estimated_bits(model, q, delta) -> float:
    return rate_bits(bin_probability(model, q, delta)).item()
