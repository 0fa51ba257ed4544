"""Synthetic sources and the raw-patch container.

Two sources back the two model families:

* ``ScaleMixtureAR1``: vectors ``x = s * u`` where ``u`` is a stationary
  AR(1) Gaussian vector and ``s`` a per-vector scale, log-uniform.  Given
  ``s`` every coordinate is Gaussian, which is what the offset oracle
  assumes; the scale is what the hyperprior has to discover.
* ``PatchSource``: 8x8 grey patches in [0, 1] from a separable AR(1)
  field with random contrast and brightness.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RPC_MAGIC = b"VRPC"
RPC_VERSION = 1


def ar1_covariance(dim: int, rho: float) -> np.ndarray:
    idx = np.arange(dim)
    return rho ** np.abs(np.subtract.outer(idx, idx))


@dataclass(frozen=True)
class ScaleMixtureAR1:
    dim: int = 16
    rho: float = 0.9
    log2_scale_lo: float = -2.0
    log2_scale_hi: float = 2.0

    def __post_init__(self):
        if not (0 <= self.rho < 1):
            raise ValueError("rho must lie in [0, 1)")
        if self.log2_scale_hi < self.log2_scale_lo:
            raise ValueError("empty scale range")

    @property
    def _chol(self) -> np.ndarray:
        return np.linalg.cholesky(ar1_covariance(self.dim, self.rho))

    @property
    def mean_square_scale(self) -> float:
        lo, hi = self.log2_scale_lo * np.log(2), self.log2_scale_hi * np.log(2)
        if hi == lo:
            return float(np.exp(2 * lo))
        return float((np.exp(2 * hi) - np.exp(2 * lo)) / (2 * (hi - lo)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.standard_normal((n, self.dim)) @ self._chol.T
        s = 2.0 ** rng.uniform(self.log2_scale_lo, self.log2_scale_hi, size=(n, 1))
        return s * u / np.sqrt(self.mean_square_scale)


@dataclass(frozen=True)
class PatchSource:
    side: int = 8
    rho: float = 0.9

    @property
    def dim(self) -> int:
        return self.side * self.side

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        chol = np.linalg.cholesky(ar1_covariance(self.side, self.rho))
        w = rng.standard_normal((n, self.side, self.side))
        field = chol @ w @ chol.T
        contrast = 2.0 ** rng.uniform(-4.0, -1.0, size=(n, 1, 1))
        bright = rng.uniform(0.25, 0.75, size=(n, 1, 1))
        return np.clip(bright + contrast * field, 0.0, 1.0).reshape(n, -1)


def make_source(family: str, dim: int, rho: float = 0.9):
    if family == "linear":
        return ScaleMixtureAR1(dim=dim, rho=rho)
    if family == "mlp":
        side = int(round(np.sqrt(dim)))
        if side * side != dim:
            raise ValueError("mlp family expects square patches")
        return PatchSource(side=side, rho=rho)
    raise ValueError(f"unknown model family {family!r}")


def write_patches(path, patches: np.ndarray) -> None:
    """Write ``(count, *dims)`` float64 patches in the raw-patch container."""
    arr = np.ascontiguousarray(patches, dtype="<f8")
    if arr.ndim < 2:
        raise ValueError("expected an array of patches")
    dims = arr.shape[1:]
    head = RPC_MAGIC + struct.pack("<BB", RPC_VERSION, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    head += struct.pack("<I", arr.shape[0])
    Path(path).write_bytes(head + arr.tobytes())


def read_patches(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != RPC_MAGIC:
        raise ValueError(f"{path}: not a raw-patch container")
    try:
        version, ndim = struct.unpack_from("<BB", buf, 4)
        if version != RPC_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        dims = struct.unpack_from(f"<{ndim}I", buf, 6)
        (count,) = struct.unpack_from("<I", buf, 6 + 4 * ndim)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated header") from exc
    pos = 10 + 4 * ndim
    n = count * int(np.prod(dims, dtype=np.int64))
    if len(buf) != pos + 8 * n:
        raise ValueError(f"{path}: body length does not match header")
    return np.frombuffer(buf, dtype="<f8", offset=pos, count=n).reshape((count,) + tuple(dims)).astype(np.float64)


def sample_files() -> list[Path]:
    return sorted((Path(__file__).parent / "data").glob("*.rpc"))
