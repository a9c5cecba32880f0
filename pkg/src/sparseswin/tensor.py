"""Reverse-mode autodiff over numpy arrays.

A :class:`Tensor` wraps a row-major ``np.ndarray``. Every differentiable
operation whose inputs require gradients records a :class:`Node` on its
output; :func:`backward` topologically orders the recorded nodes into a
:class:`Graph`, runs each node's vector-Jacobian product exactly once in
reverse order, and then releases the graph.

Broadcasting is deliberately narrow: in binary ops the first operand fixes
the output shape and the second may be a scalar or right-aligned
broadcastable into it (bias-add, masks).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import GraphError, NonFiniteError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("op", "inputs", "vjp", "released")

    def __init__(self, op: str, inputs: Sequence["Tensor"], vjp: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.vjp = vjp
        self.released = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result, recording ``vjp`` when any input needs a gradient.

    ``vjp(grad_out)`` returns one gradient (or None) per input.
    """
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values (shape {data.shape})")
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, vjp)
    return out


class Graph:
    """Topologically ordered list of the recorded ops that produced ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.tensors: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; post-order gives inputs before consumers
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.tensors.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            if t.node.released:
                raise GraphError(
                    f"graph through '{t.node.op}' was already consumed by backward(); re-run the forward pass"
                )
            stack.append((t, True))
            for inp in reversed(t.node.inputs):
                if inp.node is not None and id(inp) not in seen:
                    stack.append((inp, False))

    @property
    def ops(self) -> list[str]:
        return [t.node.op for t in self.tensors]

    def run(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.output): seed}
        for t in reversed(self.tensors):
            node = t.node
            g = grads.pop(id(t), None)
            if g is not None:
                in_grads = node.vjp(g)
                for inp, gi in zip(node.inputs, in_grads):
                    if gi is None or not inp.requires_grad:
                        continue
                    if gi.shape != inp.shape:
                        raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                    if inp.node is None:
                        inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
                    else:
                        key = id(inp)
                        grads[key] = gi if key not in grads else grads[key] + gi
            node.released = True
            node.vjp = None


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no input along its graph requires a gradient")
    if loss.node is None:
        loss.grad = np.ones_like(loss.data)
        return Graph(loss)
    if loss.node.released:
        raise GraphError("backward() already ran on this graph; re-run the forward pass")
    graph = Graph(loss)
    graph.run(np.ones_like(loss.data))
    return graph


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        out = None
    if out != a.shape:
        raise ShapeError(f"{op}: cannot broadcast {b.shape} into {a.shape}")


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = as_tensor(b, a)
    if a.size < b.size:
        a, b = b, a
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, sb)))


def sub(a: Tensor, b) -> Tensor:
    b = as_tensor(b, a)
    _check_broadcast("sub", a, b)
    sb = b.shape
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = np.asarray(b, dtype=a.dtype)
        return record("scale", a.data * c, (a,), lambda g: (g * c,))
    b = as_tensor(b, a)
    if a.size < b.size:
        a, b = b, a
    _check_broadcast("mul", a, b)
    ad, bd, sb = a.data, b.data, b.shape
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, _unbroadcast(g * ad, sb)))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return record("abs", np.abs(ad), (a,), lambda g: (np.sign(ad) * g,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return record("exp", y, (a,), lambda g: (g * y,))


# ---------------------------------------------------------------------------
# shape


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from exc
    return record("reshape", out, (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: tuple) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("permute", np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return permute(a, tuple(axes))


def roll(a: Tensor, shifts, axes) -> Tensor:
    shifts = tuple(shifts) if isinstance(shifts, (tuple, list)) else (shifts,)
    axes = tuple(axes) if isinstance(axes, (tuple, list)) else (axes,)
    back = tuple(-s for s in shifts)
    return record("roll", np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, back, axes),))


def getitem(a: Tensor, idx) -> Tensor:
    src_shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return record("getitem", np.ascontiguousarray(a.data[idx]), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return record(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return record("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (a shared weight applied to every leading index of
    ``a``) or has exactly the same leading extents as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record("matmul", ad @ bd, (a, b), vjp)
