"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` working on raw numpy arrays and a ``backward`` returning one
gradient per tensor input. Applying a function while any input requires
grad records a :class:`Node` on the output; nodes carry a global sequence
number so :func:`backward` can replay them in exact reverse execution order.

Storage defaults to float32. Arrays that are already float64 stay float64,
which is how gradient checks run a float64 shadow of the same graph.
"""

from __future__ import annotations

import itertools
import threading
from typing import Sequence

import numpy as np

_sequence = itertools.count()
_grad_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager that disables graph recording on the current thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


class Context:
    """Scratch space a Function uses to hand values from forward to backward."""

    def save(self, *values):
        self.saved = values


class Node:
    __slots__ = ("fn", "ctx", "inputs", "seq")

    def __init__(self, fn, ctx, inputs, seq):
        self.fn = fn
        self.ctx = ctx
        self.inputs = inputs
        self.seq = seq


class Function:
    """Base class for differentiable operations.

    Subclasses that set ``name`` are added to :attr:`registry`; the gradient
    check suite uses the registry to prove it covers every operation.
    """

    registry: dict[str, type["Function"]] = {}
    name: str | None = None

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.__dict__.get("name"):
            Function.registry[cls.name] = cls

    @staticmethod
    def forward(ctx, *arrays, **attrs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **attrs) -> "Tensor":
        arrays = [None if t is None else t.data for t in inputs]
        ctx = Context()
        out = cls.forward(ctx, *arrays, **attrs)
        track = is_grad_enabled() and any(t is not None and t.requires_grad for t in inputs)
        result = Tensor._wrap(out, track)
        if track:
            ctx.needs_grad = tuple(t is not None and t.requires_grad for t in inputs)
            result._node = Node(cls, ctx, inputs, next(_sequence))
        return result


class Tensor:
    """An n-dimensional float array with an optional gradient accumulator."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            is_f64 = isinstance(data, np.ndarray) and data.dtype == np.float64
            dtype = np.float64 if is_f64 else np.float32
        arr = np.array(data, dtype=dtype, copy=True)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"dimension sizes must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, retain_graph: bool = False):
        backward(self, retain_graph=retain_graph)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return AddScalar.apply(self, value=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return AddScalar.apply(self, value=-float(other))

    def __rsub__(self, other):
        return AddScalar.apply(Neg.apply(self), value=float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def backward(loss: Tensor, retain_graph: bool = False):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Gradients add onto whatever is already stored, so two calls without
    zeroing double the result. The graph is released afterwards unless
    ``retain_graph`` is set.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad; nothing to differentiate")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        _accumulate(loss, seed)
        return

    # collect every recorded tensor reachable from the loss
    recorded: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in recorded:
            continue
        recorded[id(t)] = t
        for parent in t._node.inputs:
            if parent is not None and parent._node is not None and parent.requires_grad:
                stack.append(parent)
    order = sorted(recorded.values(), key=lambda t: t._node.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): seed}
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
    for t in order:
        node = t._node
        g = grads.pop(id(t), None)
        if g is None:
            continue
        input_grads = node.fn.backward(node.ctx, g)
        if not isinstance(input_grads, tuple):
            input_grads = (input_grads,)
        for parent, pg in zip(node.inputs, input_grads):
            if parent is None or pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"{node.fn.__name__}.backward produced grad {pg.shape} for input {parent.shape}"
                )
            if parent._node is None:
                # sum a leaf's contributions first so repeated calls add identical totals
                if id(parent) in leaf_grads:
                    leaf_grads[id(parent)] = (parent, leaf_grads[id(parent)][1] + pg)
                else:
                    leaf_grads[id(parent)] = (parent, pg)
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    for leaf, g in leaf_grads.values():
        _accumulate(leaf, g)
    if not retain_graph:
        for t in order:
            t._node = None


def _accumulate(t: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# broadcasting: the second operand may be stretched onto the first, never both


def _broadcast_pair(a: Tensor, b: Tensor, op: str):
    """Return (big, small, swapped) or raise for unsupported broadcasting."""
    if a.shape == b.shape:
        return a, b, False
    if _stretches_onto(b.shape, a.shape):
        return a, b, False
    if _stretches_onto(a.shape, b.shape):
        return b, a, True
    raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _stretches_onto(small, big) -> bool:
    if len(small) > len(big):
        return False
    tail = big[len(big) - len(small):]
    return all(s == t or s == 1 for s, t in zip(small, tail))


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and grad.shape[lead + i] != 1
    )
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        ctx.shapes = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx.shapes
        return _reduce_to(grad, sa), _reduce_to(grad, sb)


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        ctx.shapes = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx.shapes
        return _reduce_to(grad, sa), -_reduce_to(grad, sb)


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        ga = _reduce_to(grad * b, a.shape) if ctx.needs_grad[0] else None
        gb = _reduce_to(grad * a, b.shape) if ctx.needs_grad[1] else None
        return ga, gb


class Div(Function):
    name = "div"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a / b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        ga = _reduce_to(grad / b, a.shape) if ctx.needs_grad[0] else None
        gb = _reduce_to(-grad * a / (b * b), b.shape) if ctx.needs_grad[1] else None
        return ga, gb


def add(a: Tensor, b: Tensor) -> Tensor:
    big, small, swapped = _broadcast_pair(a, b, "add")
    return Add.apply(big, small)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "sub")
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    big, small, _ = _broadcast_pair(a, b, "mul")
    return Mul.apply(big, small)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "div")
    return Div.apply(a, b)


class Scale(Function):
    name = "scale"

    @staticmethod
    def forward(ctx, a, factor):
        ctx.factor = factor
        return a * a.dtype.type(factor)

    @staticmethod
    def backward(ctx, grad):
        return (grad * grad.dtype.type(ctx.factor),)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


class AddScalar(Function):
    name = "add_scalar"

    @staticmethod
    def forward(ctx, a, value):
        return a + a.dtype.type(value)

    @staticmethod
    def backward(ctx, grad):
        return (grad,)


class Neg(Function):
    name = "neg"

    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, grad):
        return (-grad,)


# ---------------------------------------------------------------------------
# linear algebra and reductions


class MatMul(Function):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return np.matmul(a, b)

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        ga = gb = None
        if ctx.needs_grad[0]:
            ga = np.matmul(grad, np.swapaxes(b, -1, -2))
        if ctx.needs_grad[1]:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a, -1, -2), grad)
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``.

    Leading dims must match exactly; a 2-D right operand is shared across
    all leading dims of the left one.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ for {a.shape} and {b.shape}")
    return MatMul.apply(a, b)


def _check_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


class Softmax(Function):
    name = "softmax"

    @staticmethod
    def forward(ctx, x, axis):
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
        ctx.save(y)
        ctx.axis = axis
        return y

    @staticmethod
    def backward(ctx, grad):
        (y,) = ctx.saved
        return (y * (grad - (grad * y).sum(axis=ctx.axis, keepdims=True)),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=_check_axis(axis, x.ndim))


class LayerNorm(Function):
    name = "layer_norm"

    @staticmethod
    def forward(ctx, x, gamma, beta, eps):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
        xhat = xc * inv
        ctx.save(xhat, inv, gamma)
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, grad):
        xhat, inv, gamma = ctx.saved
        lead = tuple(range(grad.ndim - 1))
        ggamma = (grad * xhat).sum(axis=lead)
        gbeta = grad.sum(axis=lead)
        gx_hat = grad * gamma
        n = xhat.shape[-1]
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm: affine params {gamma.shape}/{beta.shape} do not match last dim {c}"
        )
    return LayerNorm.apply(x, gamma, beta, eps=eps)


class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(ctx, x, axis, keepdims):
        ctx.shape = x.shape
        ctx.axis = axis
        ctx.keepdims = keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, grad):
        if ctx.axis is not None and not ctx.keepdims:
            grad = np.expand_dims(grad, ctx.axis)
        return (np.broadcast_to(grad, ctx.shape).copy(),)


class Mean(Function):
    name = "mean"

    @staticmethod
    def forward(ctx, x, axis, keepdims):
        ctx.shape = x.shape
        ctx.axis = axis
        ctx.keepdims = keepdims
        ctx.count = x.size if axis is None else int(np.prod([x.shape[a] for a in axis]))
        return np.asarray(x.mean(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, grad):
        if ctx.axis is not None and not ctx.keepdims:
            grad = np.expand_dims(grad, ctx.axis)
        g = np.broadcast_to(grad, ctx.shape) / grad.dtype.type(ctx.count)
        return (g.astype(grad.dtype, copy=True),)


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (_check_axis(axis, ndim),)
    return tuple(sorted(_check_axis(a, ndim) for a in axis))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(x, axis=_norm_axes(axis, x.ndim), keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=_norm_axes(axis, x.ndim), keepdims=keepdims)


# ---------------------------------------------------------------------------
# shape manipulation


class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, x, shape):
        ctx.shape = x.shape
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx.shape),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or x.size % known:
            raise ShapeError(f"cannot reshape {x.shape} into {shape}")
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) into {shape}")
    return Reshape.apply(x, shape=shape)


class Permute(Function):
    name = "permute"

    @staticmethod
    def forward(ctx, x, axes):
        ctx.inverse = tuple(np.argsort(axes))
        return np.ascontiguousarray(x.transpose(axes))

    @staticmethod
    def backward(ctx, grad):
        return (np.ascontiguousarray(grad.transpose(ctx.inverse)),)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    return Permute.apply(x, axes=axes)


def transpose(x: Tensor, a: int = -2, b: int = -1) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return permute(x, axes)


class Concat(Function):
    name = "concat"

    @staticmethod
    def forward(ctx, *arrays, axis):
        ctx.axis = axis
        ctx.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        cuts = np.cumsum(ctx.sizes)[:-1]
        return tuple(np.ascontiguousarray(g) for g in np.split(grad, cuts, axis=ctx.axis))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeError("concat needs at least one tensor")
    ax = _check_axis(axis, xs[0].ndim)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(
            i != ax and s != r for i, (s, r) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"concat on axis {ax}: shapes {ref} and {t.shape} disagree")
    return Concat.apply(*xs, axis=ax)


class Slice(Function):
    name = "slice"

    @staticmethod
    def forward(ctx, x, index):
        ctx.shape = x.shape
        ctx.index = index
        return np.array(x[index], copy=True)

    @staticmethod
    def backward(ctx, grad):
        full = np.zeros(ctx.shape, dtype=grad.dtype)
        full[ctx.index] = grad
        return (full,)


def slice_(x: Tensor, index) -> Tensor:
    """Basic indexing (ints and slices only)."""
    if not isinstance(index, tuple):
        index = (index,)
    for part in index:
        if not isinstance(part, (int, slice, type(Ellipsis), np.integer)):
            raise TypeError(f"only basic indexing is supported, got {type(part).__name__}")
    return Slice.apply(x, index=index)


class Roll(Function):
    name = "roll"

    @staticmethod
    def forward(ctx, x, shifts, axes):
        ctx.shifts = shifts
        ctx.axes = axes
        return np.roll(x, shifts, axis=axes)

    @staticmethod
    def backward(ctx, grad):
        return (np.roll(grad, tuple(-s for s in ctx.shifts), axis=ctx.axes),)


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    return Roll.apply(x, shifts=tuple(shifts), axes=tuple(axes))


class GatherRows(Function):
    name = "gather_rows"

    @staticmethod
    def forward(ctx, table, index):
        ctx.index = index
        ctx.rows = table.shape[0]
        return table[index]

    @staticmethod
    def backward(ctx, grad):
        flat = ctx.index.reshape(-1)
        g = grad.reshape(flat.size, -1)
        out = np.zeros((ctx.rows, g.shape[1]), dtype=grad.dtype)
        np.add.at(out, flat, g)
        return (out,)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` for an integer array ``index``; rows of ``table`` are gathered."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    return GatherRows.apply(table, index=index)
