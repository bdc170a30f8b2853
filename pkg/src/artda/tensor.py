"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op is a :class:`Function` subclass registered in
:data:`OPS` under its kind name.  ``Function.apply`` runs the forward kernel
on raw numpy arrays and records the node on the output tensor; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order, each node exactly once.
"""

from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32

OPS: dict[str, type["Function"]] = {}


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Switch the float width used for newly created tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported float width {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class ShapeError(ValueError):
    """Raised when op inputs have incompatible extents."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "ctx", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, ctx: "Function | None" = None,
                 name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.ctx = ctx
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

    def __repr__(self) -> str:
        op = f", op={self.ctx.kind}" if self.ctx is not None else ""
        return f"Tensor(shape={self.shape}{op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from this scalar."""
        if self.data.ndim != 0:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy() if node.ctx is None else g
            else:
                node.grad = node.grad + g
            fn = node.ctx
            if fn is None:
                continue
            input_grads = fn.backward(g)
            if not isinstance(input_grads, tuple):
                input_grads = (input_grads,)
            for inp, ig in zip(fn.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(
                        f"{fn.kind}: backward produced grad of shape {ig.shape} "
                        f"for input of shape {inp.shape}")
                key = id(inp)
                grads[key] = grads[key] + ig if key in grads else ig


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every input ahead of its consumers."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.ctx is not None:
            for inp in node.ctx.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


class Function:
    """One node of the differentiation graph.

    Subclasses implement ``forward(*arrays, **kw)`` and ``backward(grad)``;
    backward returns one array (or ``None``) per input.  ``self.needs_grad``
    tells backward which inputs actually want a gradient.
    """

    kind: str = ""

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.kind:
            OPS[cls.kind] = cls

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self.needs_grad = tuple(t.requires_grad for t in inputs)

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError

    def kink_distance(self) -> float:
        """Distance of the saved inputs from the nearest non-differentiable point."""
        return np.inf

    def pattern(self):
        """Which smooth piece the saved inputs fall in, for piecewise ops; else None."""
        return None

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = any(fn.needs_grad)
        return Tensor(out, requires_grad=requires_grad, ctx=fn if requires_grad else None)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


class Add(Function):
    kind = "add"

    def forward(self, a, b):
        _broadcast_shape(self.kind, a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    kind = "sub"

    def forward(self, a, b):
        _broadcast_shape(self.kind, a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    kind = "mul"

    def forward(self, a, b):
        _broadcast_shape(self.kind, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        ga = _unbroadcast(grad * self.b, self.a.shape) if self.needs_grad[0] else None
        gb = _unbroadcast(grad * self.a, self.b.shape) if self.needs_grad[1] else None
        return ga, gb


class ScalarMul(Function):
    kind = "scalar_mul"

    def forward(self, a, scalar=1.0):
        self.scalar = scalar
        return a * a.dtype.type(scalar)

    def backward(self, grad):
        return grad * grad.dtype.type(self.scalar)


class MatMul(Function):
    """Matrix product with numpy's batched broadcasting over leading axes."""

    kind = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner extents disagree for {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        ga = gb = None
        if self.needs_grad[0]:
            ga = _unbroadcast(grad @ np.swapaxes(self.b, -1, -2), self.a.shape)
        if self.needs_grad[1]:
            gb = _unbroadcast(np.swapaxes(self.a, -1, -2) @ grad, self.b.shape)
        return ga, gb


class Exp(Function):
    kind = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return grad * self.out


class Relu(Function):
    kind = "relu"

    def forward(self, a):
        self.a = a
        return np.maximum(a, 0)

    def backward(self, grad):
        # subgradient 0 at exactly 0
        return grad * (self.a > 0)

    def kink_distance(self):
        return float(np.min(np.abs(self.a))) if self.a.size else np.inf

    def pattern(self):
        return self.a > 0


class Tanh(Function):
    kind = "tanh"

    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return grad * (1 - self.out * self.out)


class Reshape(Function):
    kind = "reshape"

    def forward(self, a, shape=()):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def backward(self, grad):
        return grad.reshape(self.in_shape)


class Transpose(Function):
    kind = "transpose"

    def forward(self, a, axes=None):
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        if sorted(self.axes) != list(range(a.ndim)):
            raise ShapeError(f"transpose: axes {self.axes} invalid for shape {a.shape}")
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return np.transpose(grad, np.argsort(self.axes))


class Sum(Function):
    kind = "sum"

    def forward(self, a, axis=None, keepdims=False):
        self.in_shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return np.broadcast_to(grad, self.in_shape).copy()


class Mean(Function):
    kind = "mean"

    def forward(self, a, axis=None, keepdims=False):
        self.in_shape, self.axis, self.keepdims = a.shape, axis, keepdims
        out = np.mean(a, axis=axis, keepdims=keepdims)
        self.count = a.size // max(np.size(out), 1)
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return np.broadcast_to(grad / grad.dtype.type(self.count), self.in_shape).copy()


class LogSoftmax(Function):
    kind = "log_softmax"

    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = a - np.max(a, axis=axis, keepdims=True)
        out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        self.out = out
        return out

    def backward(self, grad):
        softmax = np.exp(self.out)
        return grad - softmax * np.sum(grad, axis=self.axis, keepdims=True)


class Concat(Function):
    kind = "concat"

    def forward(self, *arrays, axis=0):
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError:
            raise ShapeError(
                f"concat: incompatible shapes {[a.shape for a in arrays]} along axis {axis}"
            ) from None
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return out

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class GetItem(Function):
    kind = "getitem"

    def forward(self, a, index=None):
        self.in_shape, self.index = a.shape, index
        return a[index]

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return out


class GradReverse(Function):
    """Identity forward; multiplies the incoming gradient by -1."""

    kind = "grad_reverse"

    def forward(self, a):
        return a

    def backward(self, grad):
        return -grad


def _pad_hw(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


class Conv2d(Function):
    """Stride-1 cross-correlation over NCHW input with OIkk weights.

    Implemented as im2col + one matrix product; ``padding`` is ``"valid"``
    or ``"same"`` (odd kernels only).
    """

    kind = "conv2d"

    def forward(self, x, w, padding="valid"):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
        n, c, h, wd = x.shape
        o, wc, kh, kw = w.shape
        if wc != c:
            raise ShapeError(f"conv2d: input has {c} channels but weight expects {wc}")
        if padding == "same":
            if kh != kw or kh % 2 == 0:
                raise ShapeError(f"conv2d: same padding needs an odd square kernel, got {kh}x{kw}")
            pad = kh // 2
        elif padding == "valid":
            pad = 0
        else:
            raise ValueError(f"conv2d: unknown padding {padding!r}")
        xp = _pad_hw(x, pad)
        oh, ow = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
        windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        # (n, oh, ow, c, kh, kw) -> rows of the im2col matrix
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
        w2 = w.reshape(o, -1)
        out = (cols @ w2.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
        self.cols, self.w, self.pad = cols, w, pad
        self.geom = (n, c, h, wd, oh, ow, kh, kw)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        n, c, h, wd, oh, ow, kh, kw = self.geom
        o = self.w.shape[0]
        g2 = grad.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        gw = (g2.T @ self.cols).reshape(self.w.shape) if self.needs_grad[1] else None
        gx = None
        if self.needs_grad[0]:
            dcols = (g2 @ self.w.reshape(o, -1)).reshape(n, oh, ow, c, kh, kw)
            dxp = np.zeros((n, c, h + 2 * self.pad, wd + 2 * self.pad), dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, self.pad:self.pad + h, self.pad:self.pad + wd] if self.pad else dxp
        return gx, gw


class MaxPool2d(Function):
    """2x2 max pooling with stride 2; ties resolve to the first maximum."""

    kind = "max_pool2d"

    def forward(self, x):
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"max_pool2d: needs NCHW input with even H and W, got {x.shape}")
        n, c, h, w = x.shape
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
        self.arg = np.argmax(blocks, axis=-1)
        self.blocks = blocks
        self.in_shape = x.shape
        return np.take_along_axis(blocks, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.in_shape
        mask = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(mask, self.arg[..., None], grad[..., None], axis=-1)
        mask = mask.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return mask.reshape(n, c, h, w)

    def kink_distance(self):
        top2 = np.sort(self.blocks, axis=-1)[..., -2:]
        return float(np.min(top2[..., 1] - top2[..., 0]) / 2) if top2.size else np.inf

    def pattern(self):
        return self.arg


# functional surface ------------------------------------------------------

def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def scalar_mul(a, scalar: float) -> Tensor:
    return ScalarMul.apply(a, scalar=float(scalar))


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def exp(a) -> Tensor:
    return Exp.apply(a)


def relu(a) -> Tensor:
    return Relu.apply(a)


def tanh(a) -> Tensor:
    return Tanh.apply(a)


def reshape(a, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    return Transpose.apply(a, axes=axes)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def log_softmax(a, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(a, axis=axis)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def getitem(a, index) -> Tensor:
    return GetItem.apply(a, index=index)


def conv2d(x, w, padding: str = "valid") -> Tensor:
    return Conv2d.apply(x, w, padding=padding)


def max_pool2d(x) -> Tensor:
    return MaxPool2d.apply(x)


def grad_reverse(x) -> Tensor:
    return GradReverse.apply(x)


def stop_gradient(x) -> Tensor:
    """Forward identity that detaches ``x`` from the graph."""
    x = as_tensor(x)
    return Tensor(x.data, requires_grad=False)


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by op kind name, e.g. ``forward_op("relu", x)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(OPS)}") from None
    return fn.apply(*inputs, **kwargs)


def graph_kink_distance(root: Tensor) -> float:
    """Smallest kink distance over every node recorded under ``root``."""
    return min((node.ctx.kink_distance() for node in topological_order(root)
                if node.ctx is not None), default=np.inf)


def graph_pattern(root: Tensor) -> bytes:
    """Concatenated piece patterns of every piecewise node under ``root``.

    Two evaluations with equal patterns lie on the same smooth piece.
    """
    parts = []
    for node in topological_order(root):
        pat = None if node.ctx is None else node.ctx.pattern()
        if pat is not None:
            parts.append(np.ascontiguousarray(pat).tobytes())
    return b"|".join(parts)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None

