"""Multi-objective machinery: Pareto dominance, the min-norm point in the
convex hull of per-objective gradients, and the MGDA training step.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc

__all__ = [
    "LossVector", "SimplexWeights", "GradientBundle", "dominates", "strictly_dominates",
    "min_norm_weights", "min_norm_bruteforce", "duality_gap", "mgda_step", "summed_loss_step",
    "StepDiagnostics", "DiagnosticsLog", "NonFiniteLossError", "SGD", "Adam", "GradientTracker",
]


class NonFiniteLossError(FloatingPointError):
    """A loss or gradient became NaN/inf; the step was not applied."""


@dataclass(frozen=True)
class LossVector:
    """Per-rate-point (rate, distortion, lambda) with ``L = R + lambda * D``."""

    rates: tuple[float, ...]
    distortions: tuple[float, ...]
    lambdas: tuple[float, ...]
    losses: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if not (len(self.rates) == len(self.distortions) == len(self.lambdas) >= 1):
            raise ValueError("LossVector needs N >= 1 matching entries")
        object.__setattr__(self, "losses", tuple(r + lam * d for r, d, lam in
                                                 zip(self.rates, self.distortions, self.lambdas)))

    @classmethod
    def from_losses(cls, losses: Sequence[float]) -> "LossVector":
        """Loss-only vector (R = L, D = 0) for abstract problems."""
        return cls(tuple(float(v) for v in losses), (0.0,) * len(losses), (0.0,) * len(losses))

    def __len__(self) -> int:
        return len(self.losses)

    def as_array(self) -> np.ndarray:
        return np.array(self.losses)


@dataclass(frozen=True)
class SimplexWeights:
    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim != 1 or a.size == 0 or np.any(a < 0) or abs(a.sum() - 1.0) > 1e-12:
            raise ValueError(f"not a point on the probability simplex: {a}")
        object.__setattr__(self, "alpha", a)


@dataclass(frozen=True)
class GradientBundle:
    vectors: np.ndarray  # (N, P)

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("gradient bundle must be an (N, P) array with N >= 1")
        object.__setattr__(self, "vectors", v)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    def gram(self) -> np.ndarray:
        return self.vectors @ self.vectors.T


def _vec(x) -> np.ndarray:
    return x.as_array() if isinstance(x, LossVector) else np.asarray(x, dtype=np.float64)


def dominates(a, b) -> bool:
    """``a`` dominates ``b`` when every loss of ``a`` is <= that of ``b``."""
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise ValueError(f"loss vectors differ in length: {a.size} vs {b.size}")
    return bool(np.all(a <= b))


def strictly_dominates(a, b) -> bool:
    """Dominance with at least one strict improvement."""
    return dominates(a, b) and bool(np.any(_vec(a) < _vec(b)))


def _segment_min(g11: float, g12: float, g22: float) -> tuple[float, float]:
    """Minimise |t v1 + (1-t) v2|^2 over t in [0,1]; returns (t, value)."""
    if g12 >= g11:
        return 1.0, g11
    if g12 >= g22:
        return 0.0, g22
    t = (g22 - g12) / (g11 + g22 - 2.0 * g12)
    return t, g22 + t * (g12 - g22)


def duality_gap(gram: np.ndarray, alpha: np.ndarray) -> float:
    """Frank-Wolfe gap ``a'Ga - min_i (Ga)_i`` (zero at the optimum)."""
    ga = gram @ alpha
    return float(alpha @ ga - ga.min())


def min_norm_weights(g, tol: float = 1e-8, max_iter: int = 1000) -> tuple[SimplexWeights, float]:
    """Minimum-norm point of the convex hull of the gradients.

    Frank-Wolfe on the N x N Gram matrix with exact line search, plus away
    steps and a fully corrective step over the current support (plain
    Frank-Wolfe crawls on ill-conditioned bundles); stops when the duality
    gap drops below ``tol``.  Two gradients use the closed-form segment minimiser.
    """
    bundle = g if isinstance(g, GradientBundle) else GradientBundle(g)
    if not np.isfinite(bundle.vectors).all():
        raise NonFiniteLossError("non-finite gradient in bundle")
    if tol <= 0:
        raise ValueError("tol must be positive")
    gram = bundle.gram()
    n = bundle.n
    if n == 1:
        return SimplexWeights(np.ones(1)), float(gram[0, 0])
    if n == 2:
        t, val = _segment_min(gram[0, 0], gram[0, 1], gram[1, 1])
        return SimplexWeights(np.array([t, 1.0 - t])), max(float(val), 0.0)

    # start from the best pair, like the two-task initialiser of Sener & Koltun
    best = None
    for i, j in itertools.combinations(range(n), 2):
        t, val = _segment_min(gram[i, i], gram[i, j], gram[j, j])
        if best is None or val < best[0] - 1e-15:
            best = (val, i, j, t)
    alpha = np.zeros(n)
    _, i, j, t = best
    alpha[i], alpha[j] = t, 1.0 - t

    for _ in range(max_iter):
        ga = gram @ alpha
        aa = float(alpha @ ga)
        k = int(np.argmin(ga))  # argmin returns the lowest index on ties
        gap = aa - float(ga[k])
        if gap < tol:
            break
        # away step: move mass off the worst active vertex when that promises more
        active = np.flatnonzero(alpha > 0)
        v = int(active[np.argmax(ga[active])])
        away = gap < float(ga[v]) - aa and alpha[v] < 1.0
        if not away:
            d = -alpha.copy()
            d[k] += 1.0
            step_max = 1.0
        else:
            d = alpha.copy()
            d[v] -= 1.0
            step_max = alpha[v] / (1.0 - alpha[v])
        curv = float(d @ gram @ d)
        slope = float(d @ ga)
        step = step_max if curv <= 0 else min(step_max, max(0.0, -slope / curv))
        alpha = alpha + step * d
        if away and step == step_max:
            alpha[v] = 0.0  # drop step
        alpha = _corrective(gram, alpha)
    alpha = np.maximum(alpha, 0.0)
    alpha /= alpha.sum()
    return SimplexWeights(alpha), max(float(alpha @ gram @ alpha), 0.0)


def _corrective(gram: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Move toward the affine minimiser over the support, stopping at the simplex boundary.

    Repeats while a coordinate hits zero; the objective never increases
    because it is convex along each segment and minimal at its far end.
    """
    for _ in range(alpha.size):
        sup = np.flatnonzero(alpha > 0)
        m = sup.size
        if m < 2:
            break
        kkt = np.zeros((m + 1, m + 1))
        kkt[:m, :m] = gram[np.ix_(sup, sup)]
        kkt[:m, m] = kkt[m, :m] = 1.0
        rhs = np.zeros(m + 1)
        rhs[m] = 1.0
        target = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:m]
        d = target - alpha[sup]
        shrink = d < 0
        step = min(1.0, float(np.min(alpha[sup][shrink] / -d[shrink]))) if shrink.any() else 1.0
        new = alpha.copy()
        new[sup] = np.maximum(alpha[sup] + step * d, 0.0)
        if step < 1.0:
            new[sup[shrink][np.argmin(alpha[sup][shrink] / -d[shrink])]] = 0.0
        new /= new.sum()
        if float(new @ gram @ new) > float(alpha @ gram @ alpha):
            break
        alpha = new
        if step == 1.0:
            break
    return alpha


def min_norm_bruteforce(g, resolution: float = 1e-3) -> SimplexWeights:
    """Exhaustive minimiser of ``|sum a_i g_i|^2`` over the simplex grid of spacing ``resolution``.

    The first N-2 coordinates are enumerated; along the remaining grid line
    the objective is a convex quadratic, so its grid minimum is one of the
    two grid points bracketing the continuous minimiser (or an end point).
    """
    bundle = g if isinstance(g, GradientBundle) else GradientBundle(g)
    n = bundle.n
    if n > 4:
        raise ValueError("brute-force min-norm search supports at most 4 gradients")
    if not np.isfinite(bundle.vectors).all():
        raise NonFiniteLossError("non-finite gradient in bundle")
    if n == 1:
        return SimplexWeights(np.ones(1))
    gram = bundle.gram()
    m = int(round(1.0 / resolution))
    ticks = np.arange(m + 1)
    if n == 2:
        heads = np.zeros((1, 0), dtype=np.int64)
    else:
        grids = np.meshgrid(*([ticks] * (n - 2)), indexing="ij")
        heads = np.stack([gr.reshape(-1) for gr in grids], axis=1)
        heads = heads[heads.sum(axis=1) <= m]
    rest = m - heads.sum(axis=1)                         # grid units left for the last two
    # point = (heads, t, rest - t) / m; objective as a quadratic in t
    e1, e2 = n - 2, n - 1
    base = np.zeros((heads.shape[0], n))
    base[:, :n - 2] = heads
    base[:, e2] = rest
    direction = np.zeros(n)
    direction[e1], direction[e2] = 1.0, -1.0
    gb = base @ gram                                     # (H, n)
    lin = 2.0 * gb @ direction                           # d/dt at t=0 (grid units)
    quad = float(direction @ gram @ direction)
    if quad > 0:
        t_star = -lin / (2.0 * quad)
    else:
        t_star = np.where(lin > 0, 0.0, rest)
    best_val = np.full(heads.shape[0], np.inf)
    best_t = np.zeros(heads.shape[0])
    for cand in (np.floor(t_star), np.ceil(t_star), np.zeros_like(t_star), rest.astype(np.float64)):
        t = np.clip(cand, 0, rest)
        val = np.einsum("hi,hi->h", gb, base) + lin * t + quad * t * t
        better = val < best_val
        best_val[better] = val[better]
        best_t[better] = t[better]
    h = int(np.argmin(best_val))
    alpha = base[h] + best_t[h] * direction
    return SimplexWeights(_renorm(alpha / m))


def _renorm(a: np.ndarray) -> np.ndarray:
    a = np.maximum(a, 0.0)
    return a / a.sum()


# optimizers --------------------------------------------------------------------

def _group_of(key: str) -> str:
    return key.split(":", 1)[-1].split(".", 1)[0]


class _Scaled:
    """Per-group learning-rate multipliers keyed by the parameter-name prefix."""

    def _lr(self, key: str) -> float:
        return self.lr * self.lr_scale.get(_group_of(key), 1.0)


class SGD(_Scaled):
    def __init__(self, lr: float, lr_scale: dict[str, float] | None = None):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.lr_scale = dict(lr_scale or {})

    def metric(self, key: str, shape) -> np.ndarray:
        return np.ones(shape)

    def update(self, key: str, param: gc.Tensor, grad: np.ndarray) -> None:
        param.data -= self._lr(key) * grad


class Adam(_Scaled):
    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 lr_scale: dict[str, float] | None = None):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.lr_scale = dict(lr_scale or {})
        self.b1, self.b2 = betas
        self.eps = eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def metric(self, key: str, shape) -> np.ndarray:
        """Current diagonal preconditioner ``1 / (sqrt(v_hat) + eps)`` (ones before the first update)."""
        if key not in self.state:
            return np.ones(shape)
        _, v, t = self.state[key]
        return 1.0 / (np.sqrt(v / (1 - self.b2 ** t)) + self.eps)

    def update(self, key: str, param: gc.Tensor, grad: np.ndarray) -> None:
        m, v, t = self.state.get(key, (np.zeros_like(grad), np.zeros_like(grad), 0))
        t += 1
        m = self.b1 * m + (1 - self.b1) * grad
        v = self.b2 * v + (1 - self.b2) * grad * grad
        self.state[key] = (m, v, t)
        mhat = m / (1 - self.b1 ** t)
        vhat = v / (1 - self.b2 ** t)
        param.data -= self._lr(key) * mhat / (np.sqrt(vhat) + self.eps)


# training steps ------------------------------------------------------------------

@dataclass
class StepDiagnostics:
    step: int
    alpha: np.ndarray
    losses: np.ndarray
    norm2: float


class DiagnosticsLog:
    """Line-oriented CSV: step, alpha_1..N, loss_1..N, norm2."""

    def __init__(self, path=None, n: int | None = None):
        self.rows: list[StepDiagnostics] = []
        self.path = path
        self._fh = None
        self._n = n

    def append(self, d: StepDiagnostics) -> None:
        self.rows.append(d)
        if self.path is None:
            return
        if self._fh is None:
            self._n = len(d.alpha)
            self._fh = open(self.path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(["step"] + [f"alpha_{i + 1}" for i in range(self._n)]
                                  + [f"loss_{i + 1}" for i in range(self._n)] + ["norm2"])
        self._writer.writerow([d.step] + [repr(float(a)) for a in d.alpha]
                              + [repr(float(v)) for v in d.losses] + [repr(float(d.norm2))])
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class GradientTracker:
    """Per-objective moving average of shared gradients, bias-corrected.

    Minibatch gradients of high-lambda losses are dominated by sampling
    noise, which inflates their norms and biases the min-norm weights toward
    whichever objective happens to be least noisy.  Averaging over recent
    steps shrinks that noise before the weights are solved for.
    """

    def __init__(self, beta: float):
        if not 0 < beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        self.beta = beta
        self.avg: np.ndarray | None = None
        self.t = 0

    def update(self, grads: np.ndarray) -> np.ndarray:
        self.t += 1
        self.avg = grads * self.beta if self.avg is None else (1 - self.beta) * self.avg + self.beta * grads
        return self.avg / (1 - (1 - self.beta) ** self.t)


def _grads_for(loss_fn: Callable[[int], gc.Tensor], i: int, params: dict[str, gc.Tensor]):
    for p in params.values():
        p.grad = None
    loss = loss_fn(i)
    if not np.isfinite(loss.data).all():
        raise NonFiniteLossError(f"loss {i + 1} is not finite")
    gc.backward(loss)
    grads = {}
    for k, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.isfinite(g).all():
            raise NonFiniteLossError(f"gradient of loss {i + 1} w.r.t. {k} is not finite")
        grads[k] = g
        p.grad = None
    return loss.item(), grads


def mgda_step(shared: dict[str, gc.Tensor], specific: Sequence[dict[str, gc.Tensor]],
              loss_fn: Callable[[int], gc.Tensor], optimizer, step: int = 0, tol: float = 1e-8,
              log: DiagnosticsLog | None = None, hook: Callable[[str, int], None] | None = None,
              tracker: GradientTracker | None = None, preconditioned: bool = False) -> StepDiagnostics:
    """One step of MGDA over ``N = len(specific)`` losses.

    ``loss_fn(i)`` builds the i-th loss on a fresh graph from the current
    parameters.  All N gradients are taken before any parameter changes;
    then each rate-specific group descends on its own loss, and the shared
    parameters descend along the min-norm combination of shared gradients.
    ``hook`` (for instrumentation) sees ("grad", i), ("phi", i) and ("theta", -1).
    With a ``tracker`` the weights and the combination use averaged gradients.
    ``preconditioned`` solves for the weights in the optimizer's diagonal
    metric, so the step the optimizer actually takes is the common-descent one.
    """
    n = len(specific)
    if n < 1:
        raise ValueError("need at least one rate point")
    losses = np.empty(n)
    shared_grads, specific_grads = [], []
    for i in range(n):
        if hook:
            hook("grad", i)
        params = dict(shared)
        params.update({f"phi{i}:{k}": p for k, p in specific[i].items()})
        losses[i], grads = _grads_for(loss_fn, i, params)
        shared_grads.append(np.concatenate([grads[k].reshape(-1) for k in shared]) if shared else np.zeros(0))
        specific_grads.append({k: grads[f"phi{i}:{k}"] for k in specific[i]})

    for i in range(n):
        if hook:
            hook("phi", i)
        for k, p in specific[i].items():
            optimizer.update(f"phi{i}:{k}", p, specific_grads[i][k])

    if shared:
        stacked = np.stack(shared_grads)
        if tracker is not None:
            stacked = tracker.update(stacked)
        if preconditioned:
            scale = np.sqrt(np.concatenate([optimizer.metric(k, p.shape).reshape(-1) for k, p in shared.items()]))
            weights, norm2 = min_norm_weights(stacked * scale, tol=tol)
        else:
            weights, norm2 = min_norm_weights(stacked, tol=tol)
        combo = weights.alpha @ stacked
        if hook:
            hook("theta", -1)
        _apply_flat(shared, combo, optimizer)
        alpha = weights.alpha
    else:
        alpha, norm2 = np.full(n, 1.0 / n), 0.0
    diag = StepDiagnostics(step, alpha, losses, norm2)
    if log is not None:
        log.append(diag)
    return diag


def summed_loss_step(shared: dict[str, gc.Tensor], specific: Sequence[dict[str, gc.Tensor]],
                     loss_fn: Callable[[int], gc.Tensor], optimizer, step: int = 0,
                     log: DiagnosticsLog | None = None) -> StepDiagnostics:
    """Conventional baseline: one gradient step on the sum of all N losses."""
    n = len(specific)
    if n < 1:
        raise ValueError("need at least one rate point")
    losses = np.empty(n)
    total: dict[str, np.ndarray] = {}
    specific_grads = []
    for i in range(n):
        params = dict(shared)
        params.update({f"phi{i}:{k}": p for k, p in specific[i].items()})
        losses[i], grads = _grads_for(loss_fn, i, params)
        for k in shared:
            total[k] = grads[k] if k not in total else total[k] + grads[k]
        specific_grads.append({k: grads[f"phi{i}:{k}"] for k in specific[i]})
    for i in range(n):
        for k, p in specific[i].items():
            optimizer.update(f"phi{i}:{k}", p, specific_grads[i][k])
    for k, p in shared.items():
        optimizer.update(k, p, total[k])
    diag = StepDiagnostics(step, np.full(n, 1.0 / n), losses, float("nan"))
    if log is not None:
        log.append(diag)
    return diag


def _apply_flat(params: dict[str, gc.Tensor], flat: np.ndarray, optimizer) -> None:
    pos = 0
    for k, p in params.items():
        size = p.data.size
        optimizer.update(k, p, flat[pos:pos + size].reshape(p.shape))
        pos += size
