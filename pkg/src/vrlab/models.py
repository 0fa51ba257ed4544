"""Toy transform-coding models with a mean & scale hyperprior.

Pipeline (both families)::

    y = g_a(x)        z = h_a(y)        z_hat = Q(z; delta_z)
    mu, sigma = h_s(z_hat)              y_hat = mu + Q_offset(y - mu; delta)
    x_hat = g_s(y_hat)

``g_a``/``g_s`` are affine maps ("linear" family) or one-hidden-layer tanh
MLPs ("mlp" family).  The hyper-analysis works on log channel energies and
the hyper-synthesis outputs ``log sigma`` linearly, so a per-vector scale
maps to a shift in ``z``.

Parameters live in a ``ParamStore``; each is shared (theta) or belongs to
exactly one rate point (phi_i).  Only per-rate step sizes are phi.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import gradcore as gc
from .entropy import (Bitstream, FactorizedModel, GaussianCond, StreamError, bin_probability, range_decode,
                      range_encode, rate_bits)
from .quant import OFFSET_LITERAL, OFFSET_TOWARD_ZERO

THETA = "theta"
GROUPS = ("g_a", "g_s", "h_a", "h_s", "factorized", "offset_net", "deltaz_net", "delta")


class NonFiniteActivation(FloatingPointError):
    def __init__(self, layer: str):
        self.layer = layer
        super().__init__(f"non-finite activations after {layer}")


def _check(t: gc.Tensor, layer: str) -> gc.Tensor:
    if not np.isfinite(t.data).all():
        raise NonFiniteActivation(layer)
    return t


# parameters -----------------------------------------------------------------

class ParamStore:
    """Named leaf tensors tagged as shared (``"theta"``) or rate-specific (``int`` rate index)."""

    def __init__(self):
        self.tensors: dict[str, gc.Tensor] = {}
        self.tags: dict[str, str | int] = {}

    def add(self, name: str, value, tag: str | int = THETA, trainable: bool = True) -> gc.Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        if tag != THETA and not (isinstance(tag, int) and tag >= 1):
            raise ValueError(f"bad tag {tag!r} for {name!r}")
        t = gc.Tensor(np.array(value, dtype=np.float64), requires_grad=trainable, name=name)
        self.tensors[name] = t
        self.tags[name] = tag
        return t

    def __getitem__(self, name: str) -> gc.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def group(self, name: str) -> str:
        return name.split(".", 1)[0]

    def shared(self, trainable_only: bool = True) -> dict[str, gc.Tensor]:
        return {k: t for k, t in self.tensors.items()
                if self.tags[k] == THETA and (t.requires_grad or not trainable_only)}

    def specific(self, i: int, trainable_only: bool = True) -> dict[str, gc.Tensor]:
        return {k: t for k, t in self.tensors.items()
                if self.tags[k] == i and (t.requires_grad or not trainable_only)}

    def set_trainable(self, groups: Iterable[str] | None, trainable: bool = True) -> None:
        """Toggle gradient tracking for whole groups (``None`` means every group)."""
        wanted = None if groups is None else set(groups)
        for k, t in self.tensors.items():
            if wanted is None or self.group(k) in wanted:
                t.requires_grad = trainable

    def trainable_names(self) -> list[str]:
        return [k for k, t in self.tensors.items() if t.requires_grad]

    def count(self, group: str) -> int:
        return sum(t.size for k, t in self.tensors.items() if self.group(k) == group)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for k, v in state.items():
            if k not in self.tensors:
                if strict:
                    raise KeyError(f"unknown parameter {k!r} in checkpoint")
                continue
            if self.tensors[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k!r}: {self.tensors[k].shape} vs {v.shape}")
            self.tensors[k].data = np.array(v, dtype=np.float64)
        if strict:
            missing = set(self.tensors) - set(state)
            if missing:
                raise KeyError(f"checkpoint lacks {sorted(missing)}")


@dataclass(frozen=True)
class RatePoint:
    index: int
    lam: float
    delta: float

    def __post_init__(self):
        if self.index < 1 or self.lam <= 0 or self.delta <= 0:
            raise ValueError(f"invalid rate point {self}")


def delta_schedule(lambdas: Sequence[float]) -> list[float]:
    """Step sizes ``sqrt(lambda_max / lambda_i)`` so the highest rate uses 1."""
    lam = np.asarray(lambdas, dtype=np.float64)
    if lam.size == 0 or np.any(lam <= 0) or not np.isfinite(lam).all():
        raise ValueError("lambdas must be positive and finite")
    if lam[-1] != lam.max():
        raise ValueError("the last lambda must be the largest")
    return [math.sqrt(lam[-1] / v) for v in lam]


def geometric_lambdas(n: int, lam_max: float, delta_max: float = 10.0) -> list[float]:
    """``n`` increasing lambdas whose schedule spans ``[1, delta_max]`` geometrically."""
    if n == 1:
        return [float(lam_max)]
    deltas = [delta_max ** ((n - 1 - i) / (n - 1)) for i in range(n)]
    return [lam_max / d ** 2 for d in deltas]


def high_rate_gain(lam: float) -> float:
    """Gain minimising ``log2 g + lam / (12 g^2)``, the high-resolution loss of a unit-variance input."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    return math.sqrt(lam * math.log(2.0) / 6.0)


def rate_points(lambdas: Sequence[float]) -> list[RatePoint]:
    return [RatePoint(i + 1, float(lam), d) for i, (lam, d) in enumerate(zip(lambdas, delta_schedule(lambdas)))]


# auxiliary networks -------------------------------------------------------------

def _init_mlp(store: ParamStore, prefix: str, sizes: Sequence[int], rng, last_scale: float, last_bias: float):
    for j, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = last_scale if j == len(sizes) - 2 else 1.0 / math.sqrt(a)
        store.add(f"{prefix}.w{j}", rng.normal(0.0, scale, size=(a, b)))
        store.add(f"{prefix}.b{j}", np.full(b, last_bias if j == len(sizes) - 2 else 0.0))


def _run_mlp(store: ParamStore, prefix: str, h: gc.Tensor, layers: int) -> gc.Tensor:
    for j in range(layers):
        h = gc.affine(h, store[f"{prefix}.w{j}"], store[f"{prefix}.b{j}"])
        if j < layers - 1:
            h = gc.tanh(h)
    return h


class OffsetNet:
    """(sigma, delta) -> offset in [0, 0.5): 3 affine layers, 12 tanh units.

    Inputs enter as logarithms; the output passes through ``0.5 * sigmoid``.
    """

    prefix = "offset_net"

    def __init__(self, store: ParamStore, rng, hidden: int = 12):
        self.store = store
        _init_mlp(store, self.prefix, (2, hidden, hidden, 1), rng, last_scale=0.01,
                  last_bias=math.log(0.2 / 0.8))

    def __call__(self, sigma: gc.Tensor, delta) -> gc.Tensor:
        sigma = gc.as_tensor(sigma)
        shape = sigma.shape
        ls = gc.reshape(gc.log(sigma), (-1, 1))
        ld = gc.log(gc.as_tensor(delta))
        ld = gc.broadcast_to(gc.reshape(ld, (1, 1)), ls.shape)
        h = _run_mlp(self.store, self.prefix, gc.concat([ls, ld], axis=1), 3)
        return gc.reshape(gc.mul(gc.sigmoid(h), 0.5), shape)


class DeltaZNet:
    """delta -> hyper step size > 0: 3 affine layers, 10 tanh units, softplus output.

    Initialised to output exactly 1 for every input.
    """

    prefix = "deltaz_net"

    def __init__(self, store: ParamStore, rng, hidden: int = 10):
        self.store = store
        _init_mlp(store, self.prefix, (1, hidden, hidden, 1), rng, last_scale=0.0,
                  last_bias=math.log(math.e - 1.0))

    def __call__(self, delta) -> gc.Tensor:
        ld = gc.reshape(gc.log(gc.as_tensor(delta)), (1, 1))
        return gc.reshape(gc.softplus(_run_mlp(self.store, self.prefix, ld, 3)), ())


# codec model ----------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    family: str = "linear"
    dim: int = 16
    latent: int = 16
    hyper_hidden: int = 4
    z_channels: int = 2
    variant: str = "mean_scale"
    mlp_hidden: int = 32
    init_gain: float = 10.0
    synthesis: str = "free"
    offset_mode: str = OFFSET_TOWARD_ZERO
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("linear", "mlp"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.variant not in ("mean_scale", "scale"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.synthesis not in ("inverse", "free"):
            raise ValueError(f"unknown synthesis {self.synthesis!r}")
        if self.synthesis == "inverse" and (self.family != "linear" or self.latent != self.dim):
            raise ValueError("inverse synthesis needs the linear family with latent == dim")
        if self.offset_mode not in (OFFSET_TOWARD_ZERO, OFFSET_LITERAL):
            raise ValueError(f"unknown offset mode {self.offset_mode!r}")
        if min(self.dim, self.latent, self.hyper_hidden, self.z_channels) < 1:
            raise ValueError("dimensions must be positive")


@dataclass(frozen=True)
class Flags:
    qr_offsets: bool = False
    vr_hyper: bool = False


@dataclass(frozen=True)
class ProxyMode:
    """Training stand-ins for rounding: one for the rate terms, one for the distortion path."""

    rate: str = "noise"
    distortion: str = "ste"

    def __post_init__(self):
        for v in (self.rate, self.distortion):
            if v not in ("noise", "ste"):
                raise ValueError(f"unknown proxy mode {v!r}")


class CodecModel:
    def __init__(self, config: ModelConfig, lambdas: Sequence[float] = ()):
        self.config = config
        self.params = ParamStore()
        rng = np.random.default_rng(config.seed)
        c = config
        p = self.params
        if c.family == "linear":
            p.add("g_a.w", np.eye(c.dim, c.latent) + rng.normal(0, 0.001, (c.dim, c.latent)))
            p.add("g_a.b", np.zeros(c.latent))
            if c.synthesis == "free":
                p.add("g_s.w", np.eye(c.latent, c.dim) + rng.normal(0, 0.001, (c.latent, c.dim)))
                p.add("g_s.b", np.zeros(c.dim))
        else:
            h = c.mlp_hidden
            p.add("g_a.w0", rng.normal(0, 1 / math.sqrt(c.dim), (c.dim, h)))
            p.add("g_a.b0", np.zeros(h))
            p.add("g_a.w1", rng.normal(0, 1 / math.sqrt(h), (h, c.latent)))
            p.add("g_a.b1", np.zeros(c.latent))
            p.add("g_s.w0", rng.normal(0, 1 / math.sqrt(c.latent), (c.latent, h)))
            p.add("g_s.b0", np.zeros(h))
            p.add("g_s.w1", rng.normal(0, 1 / math.sqrt(h), (h, c.dim)))
            p.add("g_s.b1", np.full(c.dim, 0.5))
        p.add("h_a.w0", np.abs(rng.normal(0, 1.0 / c.latent, (c.latent, c.hyper_hidden))))
        p.add("h_a.b0", np.zeros(c.hyper_hidden))
        p.add("h_a.w1", rng.normal(0, 0.5 / math.sqrt(c.hyper_hidden), (c.hyper_hidden, c.z_channels)))
        p.add("h_a.b1", np.zeros(c.z_channels))
        p.add("h_s.ws", rng.normal(0, 0.1, (c.z_channels, c.latent)))
        p.add("h_s.bs", np.full(c.latent, math.log(c.init_gain)))
        if c.variant == "mean_scale":
            p.add("h_s.wm", np.zeros((c.z_channels, c.latent)))
            p.add("h_s.bm", np.zeros(c.latent))
        self.factorized = FactorizedModel(p.add("factorized.loc", np.zeros(c.z_channels)),
                                          p.add("factorized.log_scale", np.zeros(c.z_channels)))
        self.offset_net = OffsetNet(p, rng)
        self.deltaz_net = DeltaZNet(p, rng)
        self.offset_override: float | None = None
        self.deltaz_override: float | None = None
        self.rates: list[RatePoint] = []
        if lambdas:
            self.set_rates(rate_points(lambdas))

    # rate points --------------------------------------------------------------
    def set_rates(self, rates: Sequence[RatePoint], trainable_delta: bool = False) -> None:
        for k in [k for k in self.params if self.params.group(k) == "delta"]:
            del self.params.tensors[k]
            del self.params.tags[k]
        self.rates = list(rates)
        for rp in self.rates:
            self.params.add(f"delta.{rp.index}", rp.delta, tag=rp.index, trainable=trainable_delta)

    def delta_param(self, rp: RatePoint | float) -> gc.Tensor | float:
        if isinstance(rp, RatePoint) and f"delta.{rp.index}" in self.params:
            return self.params[f"delta.{rp.index}"]
        return float(rp.delta if isinstance(rp, RatePoint) else rp)

    # transforms ------------------------------------------------------------------
    # The fixed gain scales latents outside the weights, so stored weights stay
    # O(1) and optimizer steps are comparable across layers.
    def g_a(self, x) -> gc.Tensor:
        p = self.params
        if self.config.family == "linear":
            y = gc.affine(x, p["g_a.w"], p["g_a.b"])
        else:
            h = gc.tanh(gc.affine(x, p["g_a.w0"], p["g_a.b0"]))
            y = gc.affine(h, p["g_a.w1"], p["g_a.b1"])
        return _check(gc.mul(y, self.config.init_gain), "g_a")

    def g_s(self, y_hat) -> gc.Tensor:
        p = self.params
        y_hat = gc.mul(y_hat, 1.0 / self.config.init_gain)
        if self.config.synthesis == "inverse":
            return _check(gc.matmul(gc.sub(y_hat, p["g_a.b"]), gc.inv(p["g_a.w"])), "g_s")
        if self.config.family == "linear":
            return _check(gc.affine(y_hat, p["g_s.w"], p["g_s.b"]), "g_s")
        h = gc.tanh(gc.affine(y_hat, p["g_s.w0"], p["g_s.b0"]))
        return _check(gc.affine(h, p["g_s.w1"], p["g_s.b1"]), "g_s")

    def h_a(self, y) -> gc.Tensor:
        p = self.params
        energy = gc.clamp_min(gc.softplus(gc.affine(gc.square(y), p["h_a.w0"], p["h_a.b0"])), 1e-12)
        return _check(gc.affine(gc.log(energy), p["h_a.w1"], p["h_a.b1"]), "h_a")

    def h_s(self, z_hat) -> tuple[gc.Tensor, gc.Tensor]:
        p = self.params
        sigma = gc.exp(gc.affine(z_hat, p["h_s.ws"], p["h_s.bs"]))
        if self.config.variant == "mean_scale":
            mu = gc.affine(z_hat, p["h_s.wm"], p["h_s.bm"])
        else:
            mu = gc.Tensor(np.zeros(sigma.shape))
        return _check(mu, "h_s.mean"), _check(sigma, "h_s.scale")

    def offsets(self, sigma: gc.Tensor, delta) -> gc.Tensor:
        if self.offset_override is not None:
            return gc.Tensor(np.full(sigma.shape, float(self.offset_override)))
        return _check(self.offset_net(sigma, delta), "offset_net")

    def hyper_step(self, delta, flags: Flags):
        if not flags.vr_hyper:
            return 1.0
        if self.deltaz_override is not None:
            return float(self.deltaz_override)
        return _check(self.deltaz_net(delta), "deltaz_net")

    def parameter_counts(self) -> dict[str, int]:
        return {g: self.params.count(g) for g in GROUPS if self.params.count(g)}

    def init_basis(self, x: np.ndarray) -> None:
        """Point the linear transforms along the principal axes of ``x`` (largest first).

        Identity-initialised transforms decorrelate only very slowly at high
        rate; starting from the sample PCA avoids that plateau.
        """
        if self.config.family != "linear":
            raise ValueError("basis initialisation applies to the linear family")
        if self.config.latent != self.config.dim:
            raise ValueError("basis initialisation needs a square transform")
        x = np.asarray(x, dtype=np.float64)
        evals, evecs = np.linalg.eigh(np.cov(x, rowvar=False))
        u = evecs[:, np.argsort(evals)[::-1]]
        u *= np.where(u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])] < 0, -1.0, 1.0)
        self.params["g_a.w"].data = u
        self.params["g_a.b"].data = -(x.mean(axis=0) @ u)
        if self.config.synthesis == "free":
            self.params["g_s.w"].data = u.T.copy()
            self.params["g_s.b"].data = x.mean(axis=0)

    def copy(self) -> "CodecModel":
        other = CodecModel(self.config)
        other.set_rates(self.rates)
        other.params.load_state(self.params.state())
        for k, t in self.params.tensors.items():
            other.params[k].requires_grad = t.requires_grad
        other.offset_override = self.offset_override
        other.deltaz_override = self.deltaz_override
        return other


def _reconstruct(model: CodecModel, residual: gc.Tensor, sigma: gc.Tensor, delta, flags: Flags) -> gc.Tensor:
    """Straight-through quantization of the mean-removed latent, with optional offsets."""
    scaled = gc.div(residual, delta)
    q_np = np.rint(scaled.data)
    q = gc.straight_through(scaled, q_np)
    if flags.qr_offsets:
        off = model.offsets(GaussianCond(0.0, sigma).sigma, delta)
        if model.config.offset_mode == OFFSET_TOWARD_ZERO:
            q = gc.sub(q, gc.mul(off, np.sign(q_np)))
        else:
            q = gc.add(q, gc.mul(off, (q_np != 0).astype(np.float64)))
    return gc.mul(q, delta)


def forward_train(model: CodecModel, x, rp: RatePoint, flags: Flags = Flags(), proxy: ProxyMode = ProxyMode(),
                  rng: np.random.Generator | None = None):
    """Differentiable (R, D, L): R in bits per source dimension, D the MSE."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.config.dim:
        raise ValueError(f"expected a batch of shape (B, {model.config.dim}), got {x.shape}")
    if flags.qr_offsets and proxy.distortion != "ste":
        raise ValueError("reconstruction offsets need the straight-through distortion proxy")
    if "noise" in (proxy.rate, proxy.distortion) and rng is None:
        raise ValueError("noise proxy needs a seeded rng")
    delta = model.delta_param(rp)
    y = model.g_a(x)
    z = model.h_a(y)
    dz = model.hyper_step(delta, flags)

    z_scaled = gc.div(z, dz)
    z_round = gc.straight_through(z_scaled, np.rint(z_scaled.data))
    if "noise" in (proxy.rate, proxy.distortion):
        z_noisy = gc.add(z_scaled, rng.uniform(-0.5, 0.5, size=z.shape))
    z_idx = z_noisy if proxy.rate == "noise" else z_round
    rate_z = rate_bits(bin_probability(model.factorized, z_idx, dz))
    # the all-noise proxy keeps the whole path smooth, which finite-difference checks rely on
    z_hat = gc.mul(z_noisy if proxy.distortion == "noise" else z_round, dz)

    mu, sigma = model.h_s(z_hat)
    cond = GaussianCond(0.0, sigma)
    residual = gc.sub(y, mu)
    if proxy.rate == "noise" or proxy.distortion == "noise":
        noise = rng.uniform(-0.5, 0.5, size=residual.shape)
    if proxy.rate == "noise":
        v = gc.add(gc.div(residual, delta), noise)
    else:
        scaled = gc.div(residual, delta)
        v = gc.straight_through(scaled, np.rint(scaled.data))
    rate_y = rate_bits(bin_probability(cond, v, delta))

    if proxy.distortion == "noise":
        y_hat = gc.add(y, gc.mul(delta, noise))
    else:
        y_hat = gc.add(mu, _reconstruct(model, residual, cond.sigma, delta, flags))
    x_hat = model.g_s(y_hat)
    dist = gc.reduce_mean(gc.square(gc.sub(x_hat, x)))
    rate = gc.div(gc.add(rate_y, rate_z), float(x.size))
    loss = gc.add(rate, gc.mul(dist, rp.lam))
    if not np.isfinite(loss.data).all():
        raise NonFiniteActivation("loss")
    return rate, dist, loss


# hard-quantization inference path --------------------------------------------------

@dataclass
class Analysis:
    """Encoder-side quantities for a batch at one step size."""

    delta: float
    delta_z: float
    q_z: np.ndarray
    q_y: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    x_hat: np.ndarray
    bits_latent_est: float
    bits_hyper_est: float
    mse: float

    @property
    def bits_est(self) -> float:
        return self.bits_latent_est + self.bits_hyper_est


def _value(t) -> float:
    return float(t.data) if isinstance(t, gc.Tensor) else float(t)


def _synthesize(model: CodecModel, q_z: np.ndarray, delta: float, dz: float, flags: Flags,
                q_y: np.ndarray | None = None):
    mu, sigma = model.h_s(gc.Tensor(q_z * dz))
    cond = GaussianCond(0.0, sigma)
    if q_y is None:
        return mu.data, cond.sigma.data
    if flags.qr_offsets:
        off = model.offsets(cond.sigma, delta).data
        if model.config.offset_mode == OFFSET_TOWARD_ZERO:
            rec = (q_y - np.sign(q_y) * off) * delta
        else:
            rec = (q_y + np.where(q_y != 0, off, 0.0)) * delta
    else:
        rec = q_y * delta
    return model.g_s(gc.Tensor(mu.data + rec)).data


def analyze(model: CodecModel, x, delta: float, flags: Flags = Flags()) -> Analysis:
    """Hard-rounding encode/decode without entropy coding; rates are model estimates."""
    x = np.asarray(x, dtype=np.float64)
    delta = float(delta)
    if not delta > 0:
        raise ValueError("delta must be positive")
    y = model.g_a(x).data
    z = model.h_a(gc.Tensor(y)).data
    dz = _value(model.hyper_step(delta, flags))
    q_z = np.rint(z / dz)
    mu, sigma = _synthesize(model, q_z, delta, dz, flags)
    q_y = np.rint((y - mu) / delta)
    x_hat = _synthesize(model, q_z, delta, dz, flags, q_y)
    bits_y = rate_bits(bin_probability(GaussianCond(0.0, sigma), q_y, delta)).item()
    bits_z = rate_bits(bin_probability(model.factorized, q_z, dz)).item()
    mse = float(np.mean((x_hat - x) ** 2))
    return Analysis(delta, dz, q_z.astype(np.int64), q_y.astype(np.int64), mu, sigma, x_hat, bits_y, bits_z, mse)


@dataclass
class Compressed:
    hyper: Bitstream
    latent: Bitstream
    x_hat: np.ndarray
    metrics: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        return self.hyper.to_bytes() + self.latent.to_bytes()

    @staticmethod
    def streams_from_bytes(buf: bytes) -> tuple[Bitstream, Bitstream]:
        hyper, used = Bitstream.from_bytes(buf)
        latent, used2 = Bitstream.from_bytes(buf[used:])
        if used + used2 != len(buf):
            raise StreamError("trailing bytes after latent stream")
        return hyper, latent


CODED_MAGIC = b"VRCF"
CODED_VERSION = 1


def pack_coded(c: Compressed, dims: Sequence[int]) -> bytes:
    """Coded-file container: magic, version, step, sample dims, then both streams."""
    head = CODED_MAGIC + struct.pack("<Bd B", CODED_VERSION, c.metrics["delta"], len(dims))
    return head + struct.pack(f"<{len(dims)}I", *dims) + c.to_bytes()


def unpack_coded(buf: bytes) -> tuple[float, tuple[int, ...], Bitstream, Bitstream]:
    if buf[:4] != CODED_MAGIC:
        raise StreamError("not a coded file")
    try:
        version, delta, ndim = struct.unpack_from("<Bd B", buf, 4)
        if version != CODED_VERSION:
            raise StreamError(f"unsupported coded-file version {version}")
        pos = 4 + struct.calcsize("<Bd B")
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    except struct.error as exc:
        raise StreamError("truncated coded-file header") from exc
    hyper, latent = Compressed.streams_from_bytes(buf[pos + 4 * ndim:])
    return float(delta), tuple(dims), hyper, latent


def psnr(mse: float, peak: float = 1.0) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def compress(model: CodecModel, x, delta: float, flags: Flags = Flags(), backend: str | None = None) -> Compressed:
    x = np.asarray(x, dtype=np.float64)
    a = analyze(model, x, delta, flags)
    hyper = range_encode(a.q_z, model.factorized, a.delta_z, backend=backend)
    latent = range_encode(a.q_y, GaussianCond(0.0, a.sigma), a.delta, backend=backend)
    metrics = {
        "delta": a.delta,
        "delta_z": a.delta_z,
        "bits_latent": latent.payload_bits,
        "bits_hyper": hyper.payload_bits,
        "bits_total": latent.payload_bits + hyper.payload_bits,
        "bits_latent_est": a.bits_latent_est,
        "bits_hyper_est": a.bits_hyper_est,
        "header_bytes": hyper.nbytes + latent.nbytes - len(hyper.payload) - len(latent.payload),
        "mse": a.mse,
        "psnr": psnr(a.mse),
        "dims": x.size,
    }
    return Compressed(hyper, latent, a.x_hat, metrics)


def decompress(model: CodecModel, hyper: Bitstream, latent: Bitstream, delta: float, flags: Flags = Flags(),
               backend: str | None = None) -> np.ndarray:
    delta = float(delta)
    dz = _value(model.hyper_step(delta, flags))
    q_z = range_decode(hyper, model.factorized, dz, backend=backend)
    mu, sigma = _synthesize(model, q_z.astype(np.float64), delta, dz, flags)
    if latent.shape != sigma.shape:
        raise StreamError(f"latent stream shape {latent.shape} does not match model output {sigma.shape}")
    q_y = range_decode(latent, GaussianCond(0.0, sigma), delta, backend=backend)
    return _synthesize(model, q_z.astype(np.float64), delta, dz, flags, q_y.astype(np.float64))


def with_flags(flags: Flags, **kw) -> Flags:
    return replace(flags, **kw)
