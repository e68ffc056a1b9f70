"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every operation records a backward rule written in terms of other recorded
operations, so calling :func:`grad` with ``create_graph=True`` yields
gradients that are themselves differentiable. That is what the gradient
penalty terms need: the critic's input gradient is built as a graph and then
differentiated again with respect to the critic's parameters.

Broadcasting is deliberately restricted to scalar-vs-tensor and equal shapes.
Anything else must go through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "NonFiniteError",
    "ShapeError",
    "UnsupportedOpError",
    "abs",
    "add",
    "add_scalar",
    "avgpool2x",
    "broadcast_to",
    "concat",
    "conv2d",
    "div",
    "elementwise",
    "finite_diff_check",
    "get_dtype",
    "grad",
    "is_grad_enabled",
    "l1_norm",
    "l2_norm",
    "leaky_relu",
    "matmul",
    "mul",
    "narrow",
    "neg",
    "no_grad",
    "precision",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "scale",
    "set_precision",
    "sqrt",
    "square",
    "sub",
    "take",
    "tanh",
    "tensor",
    "transpose",
    "upsample_nearest2x",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf, or would divide by zero."""


class GraphError(RuntimeError):
    """The differentiation request does not fit the recorded graph."""


class UnsupportedOpError(GraphError):
    """An op without a differentiable backward was hit under ``create_graph``."""


_DTYPE = np.dtype(np.float64)
_GRAD_ENABLED = True
_ids = itertools.count()


def set_precision(bits: int | str) -> None:
    """Select the engine-wide float type (64 for oracles, 32 for training)."""
    global _DTYPE
    if bits in (64, "64", "float64", np.float64):
        _DTYPE = np.dtype(np.float64)
    elif bits in (32, "32", "float32", np.float32):
        _DTYPE = np.dtype(np.float32)
    else:
        raise ValueError(f"unsupported precision {bits!r}; use 32 or 64")


def get_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def precision(bits: int | str):
    previous = _DTYPE
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def no_grad():
    """Context manager that stops graph recording."""
    return _grad_mode(False)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An array plus, when it requires grad, a link into the recorded graph.

    Leaf tensors are created by the user; interior tensors are produced by
    operations and remember their parents and backward rule. Node identifiers
    increase monotonically, which makes the graph topologically ordered by
    construction.
    """

    __slots__ = (
        "data",
        "requires_grad",
        "grad",
        "_uid",
        "_parents",
        "_backward",
        "_op",
        "_higher",
        "__weakref__",
    )

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=_DTYPE)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._uid = next(_ids)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._higher = True

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add_scalar(self, other) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_number(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other) if _is_number(other) else sub(other, self)

    def __mul__(self, other):
        return scale(self, other) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if _is_number(other) else div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(np.full(self.shape, other, dtype=self.data.dtype)), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        if exponent == 2:
            return square(self)
        if exponent == 0.5:
            return sqrt(self)
        raise NotImplementedError("only squares and square roots are supported")

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        leaves = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if t._uid in seen:
                continue
            seen.add(t._uid)
            if t._parents:
                stack.extend(p for p in t._parents if p.requires_grad)
            elif t.requires_grad:
                leaves.append(t)
        for leaf, g in zip(leaves, grad(self, leaves, allow_unused=True)):
            if g is None:
                continue
            leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


_ALLOWED_FOR_CONSTANT = (np.ndarray, list, tuple, int, float, np.floating, np.integer)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, _ALLOWED_FOR_CONSTANT):
        return Tensor(x)
    raise TypeError(f"cannot use {type(x).__name__} as a tensor operand")


def _wrap(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._uid = next(_ids)
    out._parents = ()
    out._backward = None
    out._op = "const"
    out._higher = True
    return out


def _result(data, parents, backward, op: str, higher: bool = True) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = _wrap(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._higher = higher
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return a, b
    if b.ndim == 0:
        return a, broadcast_to(b, a.shape)
    if a.ndim == 0:
        return broadcast_to(a, b.shape), b
    raise ShapeError(f"shapes {a.shape} and {b.shape} are neither equal nor scalar-vs-tensor")


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b), lambda g, needs: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g, needs: (g, neg(g) if needs[1] else None),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g, needs):
        return (mul(g, b) if needs[0] else None, mul(g, a) if needs[1] else None)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    if np.any(b.data == 0):
        raise NonFiniteError("division by zero")

    def backward(g, needs):
        ga = div(g, b) if needs[0] else None
        gb = neg(div(mul(g, out), b)) if needs[1] else None
        return ga, gb

    out = _result(a.data / b.data, (a, b), backward, "div")
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g, needs: (scale(g, c),), "scale")


def add_scalar(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data + a.data.dtype.type(c), (a,), lambda g, needs: (g,), "add_scalar")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt of a negative value")

    def backward(g, needs):
        if np.any(out.data == 0):
            raise NonFiniteError("sqrt gradient requested at zero")
        return (div(g, scale(out, 2.0)),)

    out = _result(np.sqrt(a.data), (a,), backward, "sqrt")
    return out


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g, needs: (mul(g, scale(a, 2.0)),), "square")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    sign = _wrap(np.sign(a.data))
    return _result(np.abs(a.data), (a,), lambda g, needs: (mul(g, sign),), "abs")


def tanh(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g, needs):
        return (mul(g, add_scalar(neg(square(out)), 1.0)),)

    out = _result(np.tanh(a.data), (a,), backward, "tanh")
    return out


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    dt = a.data.dtype.type
    mask = _wrap(np.where(a.data > 0, dt(1.0), dt(slope)))
    data = a.data * mask.data
    return _result(data, (a,), lambda g, needs: (mul(g, mask),), "leaky_relu")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "scale": scale,
    "sqrt": sqrt,
    "square": square,
    "abs": abs,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name; ``b`` is the constant for ``scale``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    if kind in ("neg", "sqrt", "square", "abs"):
        return fn(a)
    if b is None:
        raise ValueError(f"{kind} needs a second operand")
    return fn(a, b)


# shape plumbing -------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    return _result(data, (a,), lambda g, needs: (reshape(g, a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g, needs: (transpose(g, inverse),),
        "transpose",
    )


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def backward(g, needs):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(reduce_sum(a, axes, keepdims), 1.0 / count)


def broadcast_to(a, shape) -> Tensor:
    """Explicitly expand size-1 axes (or a 0-d tensor) to ``shape``."""
    a = _as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    if a.ndim == 0:
        source = (1,) * len(shape)
    elif a.ndim == len(shape) and all(s in (1, t) for s, t in zip(a.shape, shape)):
        source = a.shape
    else:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(source, shape)) if s != t)

    def backward(g, needs):
        return (reshape(reduce_sum(g, axes, keepdims=True), a.shape),)

    data = np.ascontiguousarray(np.broadcast_to(a.data.reshape(source), shape))
    return _result(data, (a,), backward, "broadcast_to")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g, needs):
        return tuple(
            narrow(g, axis, int(offsets[i]), sizes[i]) if needs[i] else None
            for i in range(len(tensors))
        )

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _result(data, tensors, backward, "concat")


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    axis = axis % a.ndim
    total = a.shape[axis]
    if start < 0 or length < 0 or start + length > total:
        raise ShapeError("narrow range out of bounds")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)

    def backward(g, needs):
        return (_pad_axis(g, axis, start, total - start - length),)

    return _result(a.data[tuple(index)].copy(), (a,), backward, "narrow")


def _pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    length = a.shape[axis]

    def backward(g, needs):
        return (narrow(g, axis, before, length),)

    return _result(np.pad(a.data, widths), (a,), backward, "pad_axis")


def take(a, indices) -> Tensor:
    """Gather rows along axis 0."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    n = a.shape[0]

    def backward(g, needs):
        return (_index_add(g, idx, n),)

    return _result(a.data[idx], (a,), backward, "take")


def _index_add(g: Tensor, idx: np.ndarray, n: int) -> Tensor:
    data = np.zeros((n,) + g.shape[1:], dtype=g.data.dtype)
    np.add.at(data, idx, g.data)
    return _result(data, (g,), lambda gg, needs: (take(gg, idx),), "index_add")


# linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g, needs):
        ga = matmul(g, transpose(b)) if needs[0] else None
        gb = matmul(transpose(a), g) if needs[1] else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def _conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel extent {k} exceeds padded input extent {size + 2 * pad}")
    if span % stride:
        raise ShapeError(f"output extent ({size}+2*{pad}-{k})/{stride}+1 is not integral")
    return span // stride + 1


def _span(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Columns laid out as [C*kh*kw, N*Ho*Wo]."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xt = x.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, a, b] = xt[:, :, _span(a, ho, stride), _span(b, wo, stride)]
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    o, _, kh, kw = w.shape
    n = x.shape[0]
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _conv_input_grad(gy: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    o, c, kh, kw = w.shape
    n, _, h, wd = x_shape
    ho, wo = gy.shape[2:]
    g2 = gy.transpose(1, 0, 2, 3).reshape(o, -1)
    cols = (w.reshape(o, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
    gxp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad), dtype=gy.dtype)
    for a in range(kh):
        for b in range(kw):
            gxp[:, :, _span(a, ho, stride), _span(b, wo, stride)] += cols[:, a, b]
    return np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + wd].transpose(1, 0, 2, 3))


def _conv_weight_grad(x: np.ndarray, gy: np.ndarray, w_shape, stride: int, pad: int) -> np.ndarray:
    o, _, kh, kw = w_shape
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    g2 = gy.transpose(1, 0, 2, 3).reshape(o, -1)
    return (g2 @ cols.T).reshape(w_shape)


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``w`` [O,C,kh,kw]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    if stride < 1 or pad < 0:
        raise ShapeError("stride must be >= 1 and pad >= 0")
    _conv_out_extent(x.shape[2], w.shape[2], stride, pad)
    _conv_out_extent(x.shape[3], w.shape[3], stride, pad)
    return _conv(x, w, stride, pad)


def _conv(x: Tensor, w: Tensor, stride: int, pad: int) -> Tensor:
    def backward(g, needs):
        gx = _conv_grad_input(g, w, x.shape, stride, pad) if needs[0] else None
        gw = _conv_grad_weight(x, g, w.shape, stride, pad) if needs[1] else None
        return gx, gw

    return _result(_conv_forward(x.data, w.data, stride, pad), (x, w), backward, "conv2d")


def _conv_grad_input(gy: Tensor, w: Tensor, x_shape, stride: int, pad: int) -> Tensor:
    # linear in gy: adjoint is conv; bilinear form <G, B(gy, w)> = <conv(G, w), gy>
    def backward(g, needs):
        ggy = _conv(g, w, stride, pad) if needs[0] else None
        gw = _conv_grad_weight(g, gy, w.shape, stride, pad) if needs[1] else None
        return ggy, gw

    data = _conv_input_grad(gy.data, w.data, x_shape, stride, pad)
    return _result(data, (gy, w), backward, "conv2d_grad_input")


def _conv_grad_weight(x: Tensor, gy: Tensor, w_shape, stride: int, pad: int) -> Tensor:
    # <G, C(x, gy)> = <conv(x, G), gy>
    def backward(g, needs):
        gx = _conv_grad_input(gy, g, x.shape, stride, pad) if needs[0] else None
        ggy = _conv(x, g, stride, pad) if needs[1] else None
        return gx, ggy

    data = _conv_weight_grad(x.data, gy.data, w_shape, stride, pad)
    return _result(data, (x, gy), backward, "conv2d_grad_weight")


# resampling -----------------------------------------------------------------


def upsample_nearest2x(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 4:
        raise ShapeError("upsample expects [N,C,H,W]")
    data = a.data.repeat(2, axis=2).repeat(2, axis=3)
    return _result(data, (a,), lambda g, needs: (scale(avgpool2x(g), 4.0),), "upsample2x")


def avgpool2x(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 4:
        raise ShapeError("avgpool expects [N,C,H,W]")
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x needs even extents, got {h}x{w}")
    data = a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return _result(data, (a,), lambda g, needs: (scale(upsample_nearest2x(g), 0.25),), "avgpool2x")


def separable_filter(a, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """``rows @ x @ cols.T`` over the last two axes, with constant matrices."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=a.data.dtype)
    cols = np.asarray(cols, dtype=a.data.dtype)
    if a.ndim < 2 or rows.shape[1] != a.shape[-2] or cols.shape[1] != a.shape[-1]:
        raise ShapeError(f"filter matrices {rows.shape}, {cols.shape} do not fit input {a.shape}")
    data = rows @ a.data @ cols.T
    return _result(data, (a,), lambda g, needs: (separable_filter(g, rows.T, cols.T),), "separable_filter")


# norms ----------------------------------------------------------------------


def l1_norm(a, axis=None) -> Tensor:
    return reduce_sum(abs(a), axis)


def l2_norm(a, axis=None) -> Tensor:
    """Euclidean norm; its gradient at an exactly-zero vector raises."""
    return sqrt(reduce_sum(square(a), axis))


# differentiation ------------------------------------------------------------


def grad(
    output: Tensor,
    wrt: Iterable[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[Tensor | None]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the backward computation is itself recorded, so the
    returned tensors can be differentiated again. Tensors that ``output`` does
    not depend on raise :class:`GraphError` unless ``allow_unused`` is set, in
    which case ``None`` is returned for them.
    """
    wrt = list(wrt)
    if output.data.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")

    reached: dict[int, Tensor] = {}
    stack = [output] if output.requires_grad else []
    while stack:
        t = stack.pop()
        if t._uid in reached:
            continue
        reached[t._uid] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    targets = {t._uid for t in wrt}
    for t in wrt:
        if t._uid not in reached and not allow_unused:
            raise GraphError(f"tensor {t!r} is not reachable from the output")

    interior = sorted((t for t in reached.values() if t._parents), key=lambda t: t._uid)
    relevant = set(targets & reached.keys())
    for t in interior:
        if t._uid not in relevant and any(p._uid in relevant for p in t._parents):
            relevant.add(t._uid)

    grads: dict[int, Tensor] = {}
    if output._uid in relevant:
        grads[output._uid] = _wrap(np.ones(output.shape, dtype=output.data.dtype))
    with _grad_mode(create_graph):
        for t in reversed(interior):
            g = grads.get(t._uid)
            if g is None or t._uid not in relevant:
                continue
            if t._uid not in targets:
                del grads[t._uid]
            if create_graph and not t._higher:
                raise UnsupportedOpError(f"op {t._op!r} does not support create_graph")
            needs = tuple(p._uid in relevant for p in t._parents)
            for p, pg, need in zip(t._parents, t._backward(g, needs), needs):
                if not need or pg is None:
                    continue
                prev = grads.get(p._uid)
                grads[p._uid] = pg if prev is None else add(prev, pg)

    out: list[Tensor | None] = []
    for t in wrt:
        if t._uid not in reached:
            out.append(None)
        else:
            g = grads.get(t._uid)
            out.append(g if g is not None else _wrap(np.zeros(t.shape, dtype=t.data.dtype)))
    return out


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x, step: float = 1e-4
) -> float:
    """Worst relative deviation between analytic and central-difference gradients.

    The denominator for each element is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=_DTYPE)
    probe = Tensor(x0, requires_grad=True)
    out = f(probe)
    (analytic,) = grad(out, [probe], allow_unused=True)
    analytic = np.zeros_like(x0) if analytic is None else analytic.data

    numeric = np.empty(x0.size, dtype=np.float64)
    flat = x0.reshape(-1)
    # f may call grad() itself (penalty terms), so the probes keep recording
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        hi = f(Tensor(bumped.reshape(x0.shape), requires_grad=True)).item()
        bumped[i] = flat[i] - step
        lo = f(Tensor(bumped.reshape(x0.shape), requires_grad=True)).item()
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError("function value is not finite at a perturbed point")
        numeric[i] = (hi - lo) / (2.0 * step)
    numeric = numeric.reshape(x0.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
