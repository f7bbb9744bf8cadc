"""Dense float64 tensors with reverse-mode differentiation.

Every operation builds a node holding its parents and a closure that pushes
the output gradient back to them.  ``Tensor.backward`` walks the graph in
reverse topological order.  Forward results are checked for NaN/Inf; a
non-finite value raises :class:`NonFiniteError` instead of propagating.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run operations without recording the graph (evaluation)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim and 0 in arr.shape:
        raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
    return _check_finite(arr, "tensor construction")


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-D float64 array that optionally records a gradient.

    Tensors are never mutated in place by operations; only ``grad`` is
    accumulated during :meth:`backward`.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple["Tensor", ...] = (), _op: str = ""):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    # -- basic properties ---------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    # -- graph traversal ----------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Without an explicit ``grad`` the tensor must be a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)


class Parameter(Tensor):
    """Trainable leaf tensor.  Frozen parameters are skipped by optimizers."""

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = frozen

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], Iterable]) -> Tensor:
    _check_finite(data, op)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    out._op = op
    return out


# -- elementwise ---------------------------------------------------------------

def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "add")
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "sub")
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "mul")
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / b.data ** 2, b.shape)))


def scale(a, factor: float) -> Tensor:
    a = _lift(a)
    factor = float(factor)
    return _make(a.data * factor, (a,), "scale", lambda g: (g * factor,))


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    # subgradient at exactly zero is 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** exponent
    return _make(out, (a,), "power",
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def log(a) -> Tensor:
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), "log", lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = _lift(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


_ELEMENTWISE = {"relu": relu, "add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch one of ``relu``, ``add``, ``sub``, ``mul``, ``scale`` by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- reductions and shape ops ------------------------------------------------------

def _norm_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out, dtype=np.float64), (a,), "sum", backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum_(a, axes, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), "transpose",
                 lambda g: (g.transpose(inverse),))


def getitem(a, index) -> Tensor:
    a = _lift(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index], dtype=np.float64), (a,), "getitem", backward)


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from None
    return _make(out, (a,), "broadcast", lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along ``axis``, broadcasting singleton extents elsewhere.

    ``(1,28,28,10) ++ (16,1,1,10)`` on the last axis gives ``(16,28,28,20)``.
    """
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    if len(tensors) == 1:
        return tensors[0]
    ndim = tensors[0].ndim
    if any(t.ndim != ndim for t in tensors):
        raise ShapeError(f"concat: rank mismatch {[t.shape for t in tensors]}")
    ax = axis % ndim
    others = [t.shape[:ax] + (1,) + t.shape[ax + 1:] for t in tensors]
    try:
        common = np.broadcast_shapes(*others)
    except ValueError:
        raise ShapeError(f"concat: non-broadcastable shapes {[t.shape for t in tensors]}") from None
    expanded = []
    for t in tensors:
        target = common[:ax] + (t.shape[ax],) + common[ax + 1:]
        expanded.append(t if t.shape == target else broadcast_to(t, target))
    sizes = [t.shape[ax] for t in expanded]
    out = np.concatenate([t.data for t in expanded], axis=ax)
    bounds = np.cumsum(sizes)[:-1]

    return _make(out, tuple(expanded), "concat",
                 lambda g: tuple(np.split(g, bounds, axis=ax)))


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Inverse of :func:`concat` along one axis."""
    a = _lift(a)
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to extent {a.shape[ax]}")
    pieces, start = [], 0
    for size in sizes:
        index = tuple([slice(None)] * ax + [slice(start, start + size)])
        pieces.append(getitem(a, index))
        start += size
    return pieces


# -- linear algebra ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes of ``a`` batch).

    ``b`` may be 1-D or 2-D; a 1-D ``a`` is treated as a row vector.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim == 0 or b.ndim == 0 or b.ndim > 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: dimension mismatch {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if b.ndim == 1:
            ga = np.multiply.outer(g, b.data)
            gb = np.tensordot(a.data, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
        else:
            ga = g @ b.data.T
            lead = tuple(range(a.ndim - 1))
            gb = np.tensordot(a.data, g, axes=(lead, lead)) if a.ndim > 1 else np.outer(a.data, g)
        return ga, gb

    return _make(np.asarray(out, dtype=np.float64), (a, b), "matmul", backward)


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = _lift(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), "softmax", backward)


def pool_max(x, window: Sequence[int], stride: Sequence[int] | None = None) -> Tensor:
    """Max pooling over the leading ``len(window)`` axes with floor semantics.

    Trailing axes (channels) are untouched.  The gradient goes to the first
    maximal element of each window in row-major order.
    """
    x = _lift(x)
    window = tuple(int(w) for w in window)
    stride = window if stride is None else tuple(int(s) for s in stride)
    k = len(window)
    if len(stride) != k or k > x.ndim:
        raise ShapeError(f"pool_max: window {window}/stride {stride} vs input {x.shape}")
    for ax, w in enumerate(window):
        if w > x.shape[ax]:
            raise ShapeError(f"pool_max: window {window} larger than input {x.shape}")

    views = sliding_window_view(x.data, window, axis=tuple(range(k)))
    views = views[tuple(slice(None, None, s) for s in stride)]
    out_lead = views.shape[:k]
    rest = x.shape[k:]
    flat = views.reshape(views.shape[:x.ndim] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        offsets = np.unravel_index(arg, window)
        grid = np.indices(out_lead + rest, sparse=True)
        coords = [grid[i] * stride[i] + offsets[i] for i in range(k)]
        coords += [grid[k + j] for j in range(len(rest))]
        full = np.zeros_like(x.data)
        index = tuple(np.broadcast_arrays(*coords))
        if all(s >= w for s, w in zip(stride, window)):
            full[index] = g  # disjoint windows: every target is hit once
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.ascontiguousarray(out), (x,), "pool_max", backward)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, composed from differentiable primitives."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    out = mul(centered, power(add(var, eps), -0.5))
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return _lift(x)
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(_lift(x).shape) >= rate) / (1.0 - rate)
    return mul(x, keep)
