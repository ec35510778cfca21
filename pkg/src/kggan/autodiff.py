"""Dense reverse-mode automatic differentiation on numpy arrays.

Every backward rule is written in terms of :class:`Tensor` operations, so
a gradient computed with ``create_graph=True`` is itself a differentiable
graph.  That is what makes the gradient penalty of a WGAN critic
trainable: the penalty depends on an input gradient, and its parameter
gradient is a gradient of that gradient.

    >>> x = Tensor(np.array(3.0), requires_grad=True)
    >>> (gx,) = grad(x * x, [x])
    >>> float(gx.data)
    6.0
"""
from __future__ import annotations

import builtins
import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "UsageError", "CapabilityError",
    "grad", "no_grad", "enable_grad", "is_grad_enabled",
    "tensor", "constant", "matmul", "add", "sub", "mul", "div", "neg",
    "relu", "leaky_relu", "sigmoid", "log", "exp", "sqrt", "square",
    "log_sigmoid", "log_softmax", "softmax", "clip", "concat", "split",
    "take", "reshape", "transpose", "sum", "mean", "l2_norm",
    "broadcast_to", "sum_to", "detach",
]


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the named operation."""


class UsageError(ValueError):
    """The differentiation API was called with invalid arguments."""


class CapabilityError(RuntimeError):
    """An operation has no differentiable backward rule of the needed order."""


_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(flag: bool):
    prev = is_grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager: operations inside record no graph."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """A node of the computation graph.

    ``op`` names the operation that produced the node (``"leaf"`` for
    inputs).  ``parents`` and ``backward_fn`` are only populated when the
    node was built in grad mode from at least one input requiring grad.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "backward_fn",
                 "twice_differentiable", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.twice_differentiable = True
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar
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
    def __rmatmul__(self, other): return matmul(other, self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise CapabilityError(f"pow only supports exponent 2, got {p}")

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def constant(data, like: Tensor | None = None) -> Tensor:
    if isinstance(data, Tensor):
        return data
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(data, dtype=dtype))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def _make(data, op: str, parents: Sequence[Tensor], backward_fn, twice: bool = True) -> Tensor:
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.twice_differentiable = twice
    return out


# ---------------------------------------------------------------- shapes

def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from exc
    src = x.shape
    return _make(data, "broadcast_to", (x,), lambda g: (sum_to(g, src),))


def sum_to(x: Tensor, shape) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: {x.shape} has fewer axes than {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and x.shape[lead + i] != 1)
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    if data.shape != shape:
        raise ShapeError(f"sum_to: cannot reduce {x.shape} to {shape}")
    src = x.shape
    return _make(data, "sum_to", (x,), lambda g: (broadcast_to(g, src),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    src = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from exc
    return _make(data, "reshape", (x,), lambda g: (reshape(g, src),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return _make(x.data.T.copy(), "transpose", (x,), lambda g: (transpose(g),))


def _binary_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (sum_to(g, sa), sum_to(neg(g), sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape("mul", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape("div", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = div(g, b)
        return sum_to(ga, sa), sum_to(neg(mul(ga, div(a, b))), sb)

    return _make(a.data / b.data, "div", (a, b), backward)


def neg(x: Tensor) -> Tensor:
    x = _lift(x)
    return _make(-x.data, "neg", (x,), lambda g: (neg(g),))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, "square", (x,), lambda g: (mul(g, mul(x, 2.0)),))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


# ------------------------------------------------------------ nonlinear

def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(x.dtype)
    return _make(x.data * mask, "relu", (x,), lambda g: (mul(g, mask),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    # derivative at exactly 0 is the negative-side slope
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _make(x.data * factor, "leaky_relu", (x,), lambda g: (mul(g, factor),))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    out = None

    def backward(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _make(s, "sigmoid", (x,), backward)
    return out


def log_sigmoid(x: Tensor) -> Tensor:
    """Numerically stable log(sigmoid(x))."""
    v = x.data
    data = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))
    return _make(data, "log_sigmoid", (x,), lambda g: (mul(g, sigmoid(neg(x))),))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), "log", (x,), lambda g: (div(g, x),))


def exp(x: Tensor) -> Tensor:
    out = None

    def backward(g):
        return (mul(g, out),)

    out = _make(np.exp(x.data), "exp", (x,), backward)
    return out


def sqrt(x: Tensor) -> Tensor:
    out = None

    def backward(g):
        return (div(mul(g, 0.5), out),)

    out = _make(np.sqrt(x.data), "sqrt", (x,), backward)
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = ((x.data >= lo) & (x.data <= hi)).astype(x.dtype)
    return _make(np.clip(x.data, lo, hi), "clip", (x,), lambda g: (mul(g, mask),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = None

    def backward(g):
        p = exp(out)
        return (sub(g, mul(p, sum(g, axis=axis, keepdims=True))),)

    out = _make(data, "log_softmax", (x,), backward)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


# ---------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    src = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, src),)

    return _make(data, "sum", (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is 0."""
    axes = _norm_axis(axis, x.ndim)
    src = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))
    n = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=True))
    data = n if keepdims else n.reshape([d for i, d in enumerate(src) if i not in axes])
    out = None

    def backward(g):
        norm = out if keepdims else reshape(out, kept)
        safe = add(norm, (norm.data == 0).astype(x.dtype))
        if not keepdims:
            g = reshape(g, kept)
        return (mul(x, div(g, safe)),)

    out = _make(data, "l2_norm", (x,), backward)
    return out


# ------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_lift(x) for x in xs]
    if not xs:
        raise ShapeError("concat: no operands")
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
                x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in xs]} differ off axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    data = np.concatenate([x.data for x in xs], axis=ax)
    return _make(data, "concat", tuple(xs), lambda g: tuple(split(g, sizes, axis=ax)))


def take(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    ax = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    data = x.data[tuple(index)].copy()
    src = x.shape

    def backward(g):
        return (_pad(g, src, start, ax),)

    return _make(data, "take", (x,), backward)


def _pad(g: Tensor, shape, start: int, axis: int) -> Tensor:
    full = np.zeros(shape, dtype=g.dtype)
    index = [slice(None)] * len(shape)
    index[axis] = slice(start, start + g.shape[axis])
    full[tuple(index)] = g.data
    stop = start + g.shape[axis]
    return _make(full, "pad", (g,), lambda h: (take(h, start, stop, axis),))


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % x.ndim
    if builtins.sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover extent {x.shape[ax]}")
    out, start = [], 0
    for n in sizes:
        out.append(take(x, start, start + n, axis=ax))
        start += n
    return out


# ------------------------------------------------------------- backward

def _topo_order(roots: Iterable[Tensor]) -> list[Tensor]:
    order, seen = [], set()
    stack = [(r, False) for r in sorted(roots, key=lambda t: t.id, reverse=True)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in sorted(node.parents, key=lambda t: t.id, reverse=True):
            if p.id not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output: Tensor | None = None,
         create_graph: bool = False) -> list[Tensor]:
    """Gradients of ``output`` with respect to each of ``inputs``.

    ``output`` must be a scalar unless ``grad_output`` is given.  With
    ``create_graph`` the returned gradients are differentiable graph nodes;
    otherwise they are detached leaves.  Inputs the output does not depend
    on receive zeros.
    """
    if grad_output is None:
        if output.data.size != 1:
            raise UsageError(f"grad: output must be a scalar, got shape {output.shape}")
        grad_output = Tensor(np.ones_like(output.data))
    elif grad_output.shape != output.shape:
        raise ShapeError(f"grad: grad_output {grad_output.shape} != output {output.shape}")
    inputs = list(inputs)
    for x in inputs:
        if not isinstance(x, Tensor):
            raise UsageError("grad: inputs must be Tensors")

    grads: dict[int, Tensor] = {}
    if output.requires_grad:
        grads[output.id] = grad_output
        order = _topo_order([output])
        with _grad_mode(create_graph):
            for node in reversed(order):
                g = grads.get(node.id)
                if g is None or node.backward_fn is None:
                    continue
                if create_graph and not node.twice_differentiable:
                    raise CapabilityError(f"{node.op} has no second-order rule")
                parent_grads = node.backward_fn(g)
                for parent, pg in zip(node.parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    if pg.shape != parent.shape:
                        raise ShapeError(
                            f"{node.op}: backward produced {pg.shape} for input {parent.shape}")
                    prev = grads.get(parent.id)
                    grads[parent.id] = pg if prev is None else add(prev, pg)
    result = []
    for x in inputs:
        g = grads.get(x.id)
        if g is None:
            g = Tensor(np.zeros_like(x.data))
        elif not create_graph:
            g = Tensor(g.data)
        result.append(g)
    return result
