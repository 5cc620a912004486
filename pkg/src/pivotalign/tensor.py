"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations record a DAG as they execute; `Tensor.backward` walks that graph
exactly once in reverse topological order and accumulates gradients
additively into every tensor that requires them. Graphs are rebuilt on each
forward pass, so replaying a seeded computation reproduces data and
gradients bit for bit.

Everything is float64 and numpy-backed. Binary operations broadcast with
numpy semantics; the backward pass sums gradients over broadcast axes.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_GRAD_ENABLED = True

SNAPSHOT_MAGIC = b"PVT1"


@contextmanager
def no_grad():
    """Suspend graph recording; use for evaluation and finite differencing."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation.

    `grad` persists across backward calls and accumulates additively; reset
    it to None between optimization steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backprop: Callable[[np.ndarray], tuple] | None = None

    # ------------------------------------------------------------------
    # basic introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            out = _binary_forward(self, other, np.add)

            def bp(g):
                return (_unbroadcast(g, self.data.shape),
                        _unbroadcast(g, other.data.shape))

            return _op(out, (self, other), bp)
        out = self.data + float(other)
        return _op(out, (self,), lambda g: (g,))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            out = _binary_forward(self, other, np.subtract)

            def bp(g):
                return (_unbroadcast(g, self.data.shape),
                        _unbroadcast(-g, other.data.shape))

            return _op(out, (self, other), bp)
        out = self.data - float(other)
        return _op(out, (self,), lambda g: (g,))

    def __rsub__(self, other) -> "Tensor":
        out = float(other) - self.data
        return _op(out, (self,), lambda g: (-g,))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            out = _binary_forward(self, other, np.multiply)

            def bp(g):
                return (_unbroadcast(g * other.data, self.data.shape),
                        _unbroadcast(g * self.data, other.data.shape))

            return _op(out, (self, other), bp)
        c = float(other)
        return _op(self.data * c, (self,), lambda g: (g * c,))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            out = _binary_forward(self, other, np.divide)

            def bp(g):
                return (_unbroadcast(g / other.data, self.data.shape),
                        _unbroadcast(-g * self.data / (other.data * other.data),
                                     other.data.shape))

            return _op(out, (self, other), bp)
        c = float(other)
        return _op(self.data / c, (self,), lambda g: (g / c,))

    def __rtruediv__(self, other) -> "Tensor":
        c = float(other)
        out = c / self.data
        return _op(out, (self,), lambda g: (-g * c / (self.data * self.data),))

    def __neg__(self) -> "Tensor":
        return _op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent) -> "Tensor":
        c = float(exponent)
        out = self.data ** c
        return _op(out, (self,), lambda g: (g * c * self.data ** (c - 1.0),))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _op(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise DomainError("log requires strictly positive input")
        return _op(np.log(self.data), (self,), lambda g: (g / self.data,))

    def relu(self) -> "Tensor":
        out = np.maximum(self.data, 0.0)
        mask = self.data > 0.0
        return _op(out, (self,), lambda g: (g * mask,))

    # ------------------------------------------------------------------
    # reductions and reshaping
    # ------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bp(g):
            if axis is None:
                return (np.broadcast_to(g, self.data.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, self.data.shape).copy(),)

        return _op(out, (self,), bp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if self.data.size == 0:
            raise DimensionError("mean of an empty tensor is undefined")
        out = self.data.mean(axis=axis, keepdims=keepdims)
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in _normalize_axes(axis, self.data.ndim)])

        def bp(g):
            if axis is None:
                return (np.broadcast_to(g / count, self.data.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg / count, self.data.shape).copy(),)

        return _op(out, (self,), bp)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = self.data.reshape(shape)
        return _op(out, (self,), lambda g: (g.reshape(self.data.shape),))

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out = np.transpose(self.data, axes)
        return _op(out, (self,), lambda g: (np.transpose(g, inv),))

    def __getitem__(self, key) -> "Tensor":
        out = self.data[key]
        if np.isscalar(out) or out.ndim == 0:
            out = np.asarray(out, dtype=np.float64)

        def bp(g):
            buf = np.zeros_like(self.data)
            buf[key] = g
            return (buf,)

        return _op(out, (self,), bp)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            raise ContractError("matmul requires a Tensor operand")
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError("matmul operands must have ndim >= 2")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(
                f"matmul inner extents differ: {a.shape} @ {b.shape}")
        try:
            out = a @ b
        except ValueError as exc:
            raise DimensionError(str(exc)) from None

        def bp(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

        return _op(out, (self, other), bp)

    # ------------------------------------------------------------------
    # backward
    # ------------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar loss, accumulating into `grad`."""
        if self.data.size != 1:
            raise ContractError("backward requires a scalar loss")
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        buf: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = buf.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backprop is None:
                continue
            for parent, pg in zip(node._parents, node._backprop(g)):
                if pg is None or not parent.requires_grad:
                    continue
                cur = buf.get(id(parent))
                buf[id(parent)] = pg if cur is None else cur + pg


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _binary_forward(a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


def _op(data: np.ndarray, parents: tuple[Tensor, ...], backprop) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backprop = backprop
    else:
        out.requires_grad = False
        out._parents = ()
        out._backprop = None
    return out


# ----------------------------------------------------------------------
# free functions
# ----------------------------------------------------------------------


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat requires at least one tensor")
    arrs = [t.data for t in tensors]
    try:
        out = np.concatenate(arrs, axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    sizes = [a.shape[axis] for a in arrs]
    offsets = np.cumsum([0] + sizes)

    def bp(g):
        pieces = []
        index: list = [slice(None)] * g.ndim
        for lo, hi in zip(offsets[:-1], offsets[1:]):
            index[axis] = slice(int(lo), int(hi))
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return _op(out, tuple(tensors), bp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`; rows sum to one."""
    if x.data.shape[axis] == 0:
        raise DimensionError("softmax along an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _op(out, (x,), bp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.shape[axis] == 0:
        raise DimensionError("log_softmax along an empty axis")
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _op(out, (x,), bp)


def clip(x: Tensor, lo: float | None, hi: float | None) -> Tensor:
    """Clamp values to [lo, hi]; the gradient passes through inside the band."""
    out = np.clip(x.data, lo, hi)
    inside = np.ones_like(x.data, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return _op(out, (x,), lambda g: (g * inside,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply affine."""
    if x.data.shape[-1] < 2:
        raise DimensionError("layer_norm requires a last-axis extent of at least 2")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return centered * inv * gain + bias


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two 1-D vectors, norms floored at 1e-12."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise DimensionError("cosine_similarity expects 1-D vectors")
    if a.data.shape != b.data.shape:
        raise DimensionError("cosine_similarity vectors differ in length")
    na2 = float((a.data * a.data).sum())
    nb2 = float((b.data * b.data).sum())
    if na2 == 0.0 or nb2 == 0.0:
        raise DomainError("cosine similarity of a zero vector is undefined")
    na = clip((a * a).sum() ** 0.5, 1e-12, None)
    nb = clip((b * b).sum() ** 0.5, 1e-12, None)
    return (a * b).sum() / (na * nb)


def dropout(x: Tensor, p: float, rng) -> Tensor:
    """Inverted dropout with an explicit mask seed (int or numpy Generator).

    Training multiplies by mask/(1-p); evaluation simply skips the call,
    which equals the expectation of the training output.
    """
    if not 0.0 <= p < 1.0:
        raise ContractError("dropout probability must lie in [0, 1)")
    if p == 0.0:
        return x
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    mask = (gen.random(x.data.shape) >= p) / (1.0 - p)
    return x * Tensor(mask)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Select rows of a 2-D table by integer id; gradients scatter-add back."""
    if table.data.ndim != 2:
        raise DimensionError("gather_rows expects a 2-D table")
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise DomainError("row id out of range")
    out = table.data[ids]

    def bp(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (buf,)

    return _op(out, (table,), bp)


# ----------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    max_checks: int | None = None,
    seed: int = 0,
) -> float:
    """Compare backward gradients of f at x against central differences.

    Returns the maximum relative error, with the denominator floored at
    max(|analytic|, |numeric|, 1e-8). Large tensors can be spot-checked by
    passing `max_checks`; coordinates are then chosen by a seeded rng.
    Resets `x.grad` as a side effect.
    """
    x.grad = None
    loss = f(x)
    if loss.data.size != 1:
        raise ContractError("finite_diff_check requires a scalar-valued f")
    loss.backward()
    if x.grad is None:
        raise ContractError("f(x) does not depend on x")
    analytic = x.grad.reshape(-1)
    n = x.data.size
    if max_checks is not None and max_checks < n:
        picks = np.sort(np.random.default_rng(seed).choice(n, size=max_checks,
                                                           replace=False))
    else:
        picks = np.arange(n)
    worst = 0.0
    with no_grad():
        for i in picks:
            mi = np.unravel_index(int(i), x.data.shape)
            orig = x.data[mi]
            x.data[mi] = orig + h
            fp = float(f(x).data.reshape(()))
            x.data[mi] = orig - h
            fm = float(f(x).data.reshape(()))
            x.data[mi] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[int(i)])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    x.grad = None
    return worst


# ----------------------------------------------------------------------
# snapshot format: magic "PVT1", u32 rank, u32 extents, f64 row-major,
# all little-endian
# ----------------------------------------------------------------------


def write_snapshot(fh: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("refusing to snapshot non-finite values")
    fh.write(SNAPSHOT_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_snapshot(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != SNAPSHOT_MAGIC:
        raise ContractError(f"bad snapshot magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise ContractError("snapshot truncated")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_snapshot(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_snapshot(fh)
