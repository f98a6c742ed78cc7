"""Dense float32 tensors with broadcasting arithmetic and reverse-mode autodiff.

Every layer in the library is expressed through these primitives plus a handful
of fused layer operations that register their own backward rules on the same
tape.  Storage is always float32; accumulating operations (reductions, matmul
inner loops, softmax) run in float64 and round the result back to float32,
which keeps the equivariance checks tolerant and the results deterministic.

The graph is a flat tape: nodes are appended in creation order, which is a
topological order by construction, and ``backward`` replays it once in
reverse.  Tensors are immutable after construction; every operation returns a
fresh tensor (no views escape).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidAxis, NonFinite, NotScalar, ShapeMismatch

GradContribs = Iterable[tuple["Tensor", np.ndarray]]

_TAPE: list["Node"] = []
_GRAD_ENABLED: bool = True


class Node:
    """One recorded operation: output plus a rule producing input gradients."""

    __slots__ = ("out", "backward_fn")

    def __init__(self, out: "Tensor", backward_fn: Callable[[np.ndarray], GradContribs]):
        self.out = out
        self.backward_fn = backward_fn


def _assert_finite(arr: np.ndarray, what: str) -> None:
    # min/max both propagate NaN and catch +-Inf without allocating a mask
    if arr.size and not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise NonFinite(f"{what} contains NaN or Inf")


class Tensor:
    """A float32 array with an optional gradient slot.

    ``requires_grad`` marks leaves (parameters, inputs under test); their
    ``grad`` accumulates across ``backward`` calls until ``zero_grad``.
    Intermediate results participate in the graph but keep no ``grad`` of
    their own.
    """

    __slots__ = ("data", "grad", "requires_grad", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        _assert_finite(arr, "tensor data")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._is_leaf = True

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be rank 0.  Repeated calls without clearing accumulate.
        """
        if self.ndim != 0:
            raise NotScalar(f"backward requires a scalar, got shape {self.shape}")
        flows: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float32)}
        _accumulate_leaf(self, flows[id(self)])
        for node in reversed(_TAPE):
            g = flows.pop(id(node.out), None)
            if g is None:
                continue
            for inp, contrib in node.backward_fn(g):
                if not inp.requires_grad:
                    continue
                if inp._is_leaf:
                    _accumulate_into_grad(inp, contrib)
                else:
                    prev = flows.get(id(inp))
                    if prev is None:
                        flows[id(inp)] = np.asarray(contrib, dtype=np.float32)
                    else:
                        prev += contrib

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)

    def max(self, axes=None):
        return reduce_max(self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad and t._is_leaf:
        _accumulate_into_grad(t, g)


def _accumulate_into_grad(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float32, copy=True)
    else:
        t.grad += g


# -- tape control --------------------------------------------------------------


def record(out: Tensor, backward_fn: Callable[[np.ndarray], GradContribs],
           inputs: Sequence[Tensor]) -> Tensor:
    """Register a node if grad mode is on and any input needs gradients.

    Fused layer operations use this to attach hand-written backward rules.
    """
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_leaf = False
        _TAPE.append(Node(out, backward_fn))
    return out


class ScratchPool:
    """Recycles large work buffers across training steps.

    Fresh multi-hundred-MB allocations pay a page-fault toll on every touch;
    the fused layer ops acquire their big outputs here instead.  Buffers stay
    checked out until ``clear_graph`` (end of the step) returns them.
    """

    def __init__(self):
        self._free: dict[tuple, list[np.ndarray]] = {}
        self._out: list[np.ndarray] = []

    def acquire(self, shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
        key = (tuple(shape), np.dtype(dtype).str)
        free = self._free.get(key)
        buf = free.pop() if free else np.empty(shape, dtype=dtype)
        self._out.append(buf)
        return buf

    def recycle(self) -> None:
        for buf in self._out:
            self._free.setdefault((buf.shape, buf.dtype.str), []).append(buf)
        self._out.clear()

    def drop(self) -> None:
        self._free.clear()
        self._out.clear()


scratch = ScratchPool()


def clear_graph() -> None:
    """Drop all recorded nodes and recycle scratch (frees the step's intermediates)."""
    _TAPE.clear()
    scratch.recycle()


def graph_size() -> int:
    return len(_TAPE)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def seeded_rng(seed: int) -> np.random.Generator:
    """The single deterministic PRNG stream used for all randomness."""
    return np.random.default_rng(np.uint64(seed))


# -- broadcasting helpers --------------------------------------------------------


def _broadcast_check(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over the axes that broadcasting expanded, back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.astype(np.float32, copy=False)


def _make(a: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = a
    t.grad = None
    t.requires_grad = False
    t._is_leaf = True
    return t


def _finish(out_data: np.ndarray, backward_fn, inputs, what: str) -> Tensor:
    _assert_finite(out_data, what)
    out = _make(out_data)
    return record(out, backward_fn, inputs)


# -- elementwise ops -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b)

    def bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _finish(a.data + b.data, bw, (a, b), "add output")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b)

    def bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _finish(a.data - b.data, bw, (a, b), "sub output")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b)

    def bw(g):
        return [(a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape))]

    return _finish(a.data * b.data, bw, (a, b), "mul output")


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b)

    def bw(g):
        return [(a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))]

    return _finish(a.data / b.data, bw, (a, b), "div output")


def neg(a: Tensor) -> Tensor:
    return _finish(-a.data, lambda g: [(a, -g)], (a,), "neg output")


def power(a: Tensor, p: float) -> Tensor:
    out_data = a.data ** np.float32(p)

    def bw(g):
        return [(a, g * np.float32(p) * a.data ** np.float32(p - 1))]

    return _finish(out_data, bw, (a,), "power output")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bw(g):
        return [(a, g * (0.5 / out_data))]

    return _finish(out_data, bw, (a,), "sqrt output")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        return [(a, g * out_data)]

    return _finish(out_data, bw, (a,), "exp output")


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def bw(g):
        return [(a, g / a.data)]

    return _finish(out_data, bw, (a,), "log output")


def sigmoid(a: Tensor) -> Tensor:
    # stable both directions: exp of a negative magnitude only
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)),
                        np.exp(x) / (1.0 + np.exp(x))).astype(np.float32)

    def bw(g):
        return [(a, g * out_data * (1.0 - out_data))]

    return _finish(out_data, bw, (a,), "sigmoid output")


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, np.float32(0))

    def bw(g):
        return [(a, g * (a.data > 0))]

    return _finish(out_data, bw, (a,), "relu output")


# -- matmul / softmax / reductions -------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 matrix product with float64 inner accumulation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} @ {b.shape}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out_data = (a64 @ b64).astype(np.float32)

    def bw(g):
        g64 = g.astype(np.float64)
        return [(a, (g64 @ b64.T).astype(np.float32)),
                (b, (a64.T @ g64).astype(np.float32))]

    return _finish(out_data, bw, (a, b), "matmul output")


def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis`` (max subtracted first)."""
    if not -a.ndim <= axis < a.ndim:
        raise InvalidAxis(f"axis {axis} invalid for shape {a.shape}")
    x = a.data.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out64 = e / e.sum(axis=axis, keepdims=True)
    out_data = out64.astype(np.float32)

    def bw(g):
        g64 = g.astype(np.float64)
        inner = (g64 * out64).sum(axis=axis, keepdims=True)
        return [(a, (out64 * (g64 - inner)).astype(np.float32))]

    return _finish(out_data, bw, (a,), "softmax output")


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % ndim if -ndim <= a < ndim else a for a in axes)
    if any(not 0 <= a < ndim for a in axes) or len(set(axes)) != len(axes):
        raise InvalidAxis(f"axes {axes} invalid for rank {ndim}")
    return axes


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, a.ndim)
    if not axes:
        return _finish(a.data.copy(), lambda g: [(a, g)], (a,), "sum output")
    out_data = a.data.sum(axis=axes, dtype=np.float64).astype(np.float32)

    def bw(g):
        ge = np.expand_dims(g, axes)
        return [(a, np.broadcast_to(ge, a.shape).astype(np.float32, copy=True))]

    return _finish(out_data, bw, (a,), "sum output")


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, a.ndim)
    if not axes:
        return _finish(a.data.copy(), lambda g: [(a, g)], (a,), "mean output")
    count = int(np.prod([a.shape[i] for i in axes]))
    out_data = (a.data.sum(axis=axes, dtype=np.float64) / count).astype(np.float32)

    def bw(g):
        ge = np.expand_dims(g / count, axes)
        return [(a, np.broadcast_to(ge, a.shape).astype(np.float32, copy=True))]

    return _finish(out_data, bw, (a,), "mean output")


def reduce_max(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, a.ndim)
    if not axes:
        return _finish(a.data.copy(), lambda g: [(a, g)], (a,), "max output")
    out_data = a.data.max(axis=axes)

    def bw(g):
        full = np.expand_dims(out_data, axes)
        mask = (a.data == full)
        counts = mask.sum(axis=axes, keepdims=True)
        ge = np.expand_dims(g, axes)
        return [(a, (mask * (ge / counts)).astype(np.float32))]

    return _finish(out_data, bw, (a,), "max output")


# -- shape ops ----------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = a.data.reshape(shape).copy()

    def bw(g):
        return [(a, g.reshape(a.shape))]

    return _finish(out_data, bw, (a,), "reshape output")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        return [(a, np.ascontiguousarray(g.transpose(inv)))]

    return _finish(np.ascontiguousarray(a.data.transpose(axes)), bw, (a,), "transpose output")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        parts = np.split(g, len(tensors), axis=axis)
        return [(t, np.ascontiguousarray(np.squeeze(p, axis=axis)))
                for t, p in zip(tensors, parts)]

    return _finish(out_data, bw, tuple(tensors), "stack output")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        return [(t, np.ascontiguousarray(p)) for t, p in zip(tensors, parts)]

    return _finish(out_data, bw, tuple(tensors), "concatenate output")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of ``logits`` [N, classes] against integer labels."""
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be [N, classes], got {logits.shape}")
    n = logits.shape[0]
    x = logits.data.astype(np.float64)
    x = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=1, keepdims=True))
    logp = x - lse
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)

    def bw(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return [(logits, (float(g) * d / n).astype(np.float32))]

    return _finish(np.float32(loss), bw, (logits,), "cross entropy")
