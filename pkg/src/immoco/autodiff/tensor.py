"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation builds a fresh node that remembers its parents and a
closure propagating the output gradient back to them. Calling
:meth:`Tensor.backward` on a scalar walks the graph once in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-12

_STRICT = False


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity reached an operation while strict mode is on."""


@contextlib.contextmanager
def strict_mode(enabled: bool = True):
    """Reject NaN inputs to every primitive inside the block."""
    global _STRICT
    previous = _STRICT
    _STRICT = enabled
    try:
        yield
    finally:
        _STRICT = previous


def _check(*arrays: np.ndarray) -> None:
    if _STRICT:
        for a in arrays:
            if np.isnan(a).any():
                raise NonFiniteError("NaN input encountered in strict mode")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _op: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op

    # -- basic attributes ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # -- graph ---------------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            np.add(self.grad, g, out=self.grad, casting="unsafe")

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable tensor that requires it.

        Leaf gradients accumulate across calls; intermediate gradients are
        reset so repeated passes over the same graph are reproducible.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)
        if not self._parents:
            return
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self, eps: float = EPS):
        return log(self, eps)

    def sqrt(self, eps: float = EPS):
        return sqrt(self, eps)

    def abs(self):
        return tabs(self)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    """Wrap python scalars so that they adopt the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Create the output tensor of a primitive.

    ``backward`` receives the output gradient and is responsible for calling
    ``_accumulate`` on parents that require a gradient. It is attached only
    when at least one parent does.
    """
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


def _broadcast_shape(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- binary elementwise ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b)
    _check(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b)
    _check(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b)
    _check(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return make_node(a.data * b.data, (a, b), backward, "mul")


def _guard(x: np.ndarray, eps: float) -> np.ndarray:
    # keep the sign, push magnitudes below eps out to eps
    return np.where(np.abs(x) < eps, np.where(x < 0, -eps, eps), x)


def div(a, b, eps: float = EPS) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b)
    _check(a.data, b.data)
    den = _guard(b.data, eps)
    out = a.data / den

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / den)
        if b.requires_grad:
            b._accumulate(-g * out / den)

    return make_node(out, (a, b), backward, "div")


# -- unary elementwise -------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    _check(a.data)

    def backward(g):
        a._accumulate(-g)

    return make_node(-a.data, (a,), backward, "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    _check(a.data)
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return make_node(out, (a,), backward, "exp")


def log(a, eps: float = EPS) -> Tensor:
    """Natural log of ``a + eps``."""
    a = as_tensor(a)
    _check(a.data)
    shifted = a.data + eps

    def backward(g):
        a._accumulate(g / shifted)

    return make_node(np.log(shifted), (a,), backward, "log")


def sqrt(a, eps: float = EPS) -> Tensor:
    """Square root of ``a + eps``; finite derivative at zero."""
    a = as_tensor(a)
    _check(a.data)
    out = np.sqrt(a.data + eps)

    def backward(g):
        a._accumulate(g * 0.5 / out)

    return make_node(out, (a,), backward, "sqrt")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    _check(a.data)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return make_node(np.abs(a.data), (a,), backward, "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    _check(a.data)
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return make_node(a.data * mask, (a,), backward, "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    _check(a.data)
    out = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out * out))

    return make_node(out, (a,), backward, "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    _check(a.data)
    x = a.data
    # split by sign to avoid overflow in exp
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)

    def backward(g):
        a._accumulate(g * out * (1.0 - out))

    return make_node(out, (a,), backward, "sigmoid")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    _check(a.data)
    out = a.data ** exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return make_node(out, (a,), backward, "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    _check(a.data)

    def backward(g):
        a._accumulate(2.0 * g * a.data)

    return make_node(a.data * a.data, (a,), backward, "square")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "neg": neg, "exp": exp, "log": log, "sqrt": sqrt, "abs": tabs,
    "relu": relu, "tanh": tanh, "sigmoid": sigmoid,
}
_BINARY = {"add", "sub", "mul", "div"}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"{op_kind} takes one operand")
    return fn(a)


# -- linear algebra and reductions -------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [m,k]x[k,n], got {a.shape} and {b.shape}")
    _check(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return make_node(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reduce(a, kind: str = "sum", axis=None, keepdims: bool = False) -> Tensor:
    if kind == "sum":
        return tsum(a, axis, keepdims)
    if kind == "mean":
        return mean(a, axis, keepdims)
    raise ValueError(f"unknown reduction {kind!r}")


# -- shape manipulation ------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def backward(g):
        a._accumulate(g.reshape(old))

    return make_node(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(np.transpose(g, inv))

    return make_node(np.transpose(a.data, axes), (a,), backward, "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return make_node(a.data[index], (a,), backward, "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return make_node(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return make_node(np.stack([t.data for t in ts], axis=axis), ts, backward, "stack")


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _coerce(a, b)
    cond = np.asarray(cond, dtype=bool)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.where(cond, g, 0.0))
        if b.requires_grad:
            b._accumulate(np.where(cond, 0.0, g))

    return make_node(np.where(cond, a.data, b.data), (a, b), backward, "where")
