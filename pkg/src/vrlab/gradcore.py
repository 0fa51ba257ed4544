"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Every operation records its parents and a closure that pushes the output
gradient back to them (a dynamic tape).  ``backward`` walks the recorded
graph in reverse topological order, accumulates gradients into leaves that
require them, and then frees the closures so the same graph cannot be
differentiated twice.
"""
from __future__ import annotations

import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "Tensor", "ShapeError", "GraphConsumedError", "tensor", "as_tensor",
    "add", "sub", "mul", "div", "neg", "matmul", "affine", "relu", "softplus",
    "sigmoid", "tanh", "exp", "log", "square", "sqrt", "abs_", "normal_cdf",
    "clamp_min", "reduce_sum", "reduce_mean", "concat", "slice_", "broadcast_to",
    "reshape", "straight_through", "detach", "backward", "finite_diff_check",
    "save_params", "load_params", "CHECKPOINT_MAGIC", "CHECKPOINT_VERSION",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        desc = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class GraphConsumedError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return slice_(self, index)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _bshape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# elementwise binary ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)
    return _make(out, (a, b), "div", bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        return g @ b.data.T, a.data.T @ g
    return _make(a.data @ b.data, (a, b), "matmul", bw)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` for a batch ``x`` of shape (B, n_in)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("affine", x.shape, w.shape)
    if b.shape not in ((w.shape[1],), (1, w.shape[1])):
        raise ShapeError("affine", w.shape, b.shape)

    def bw(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0).reshape(b.shape)
    return _make(x.data @ w.data + b.data, (x, w, b), "affine", bw)


def inv(a) -> Tensor:
    """Inverse of a square matrix; ``numpy.linalg.LinAlgError`` if singular."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("inv", a.shape)
    out = np.linalg.inv(a.data)
    return _make(out, (a,), "inv", lambda g: (-out.T @ g @ out.T,))


# elementwise unary -----------------------------------------------------------

def _unary(op: str, a, out: np.ndarray, dfn) -> Tensor:
    a = as_tensor(a)
    return _make(out, (a,), op, lambda g: (g * dfn(),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _unary("relu", a, np.maximum(a.data, 0.0), lambda: (a.data > 0).astype(np.float64))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _unary("softplus", a, out, lambda: _sigmoid(a.data))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _unary("sigmoid", a, out, lambda: out * (1.0 - out))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _unary("tanh", a, out, lambda: 1.0 - out * out)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _unary("exp", a, out, lambda: out)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _unary("log", a, np.log(a.data), lambda: 1.0 / a.data)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _unary("square", a, a.data * a.data, lambda: 2.0 * a.data)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _unary("sqrt", a, out, lambda: 0.5 / out)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _unary("abs", a, np.abs(a.data), lambda: np.sign(a.data))


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_cdf(a) -> Tensor:
    """Standard normal CDF."""
    a = as_tensor(a)
    return _unary("normal_cdf", a, ndtr(a.data),
                  lambda: _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    return _unary("clamp_min", a, np.maximum(a.data, lo), lambda: (a.data >= lo).astype(np.float64))


# reductions and shape ops -----------------------------------------------------

def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return _make(np.asarray(out), (a,), "reduce_sum", bw)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape),)
    return _make(np.asarray(out), (a,), "reduce_mean", bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts
    return _make(out, ts, "concat", bw)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError:
        raise ShapeError("slice", a.shape) from None

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _make(np.array(out, dtype=np.float64), (a,), "slice", bw)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None
    return _make(np.array(out), (a,), "broadcast", lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def straight_through(a, value) -> Tensor:
    """Forward ``value``, backward identity to ``a`` (straight-through estimator)."""
    a = as_tensor(a)
    value = np.asarray(value, dtype=np.float64)
    if value.shape != a.shape:
        raise ShapeError("straight_through", a.shape, value.shape)
    return _make(value.copy(), (a,), "straight_through", lambda g: (g,))


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# backward ---------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward pass")
    if not loss.requires_grad:
        loss._consumed = True
        return
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None and node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    for node in order:
        if not node.is_leaf:
            node._backward = None
            node._consumed = True
    loss._consumed = True


# numeric check ----------------------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-4,
                      eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated with each parameter element nudged by ``+-h``; it must
    be deterministic.  Error per element is ``|a - n| / (|a| + eps)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = f().item()
            flat[k] = orig - h
            down = f().item()
            flat[k] = orig
            num = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[k]
            if not (math.isfinite(up) and math.isfinite(down) and math.isfinite(a)):
                raise FloatingPointError(f"non-finite value while checking {p.name or 'param'}[{k}]")
            worst = max(worst, abs(a - num) / (abs(a) + eps))
    return worst


# checkpoints ------------------------------------------------------------------

CHECKPOINT_MAGIC = b"VRLP"
CHECKPOINT_VERSION = 1


def save_params(path, params: dict[str, np.ndarray | Tensor]) -> None:
    """Write named float64 arrays; layout is described in docs/formats.md."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(params))]
    for name, value in params.items():
        # np.ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(buf):
                raise ValueError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes after last record")
    return out
