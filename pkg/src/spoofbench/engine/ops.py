"""Differentiable operations.

Primitives subclass :class:`Function`; everything else (softmax, batch-norm,
pooling, activations) is composed from primitives and therefore inherits
higher-order differentiability for free. Image tensors are NHWC.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Function, ShapeError, Tensor, as_tensor

# ---------------------------------------------------------------------------
# shape helpers


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}") from None


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


# ---------------------------------------------------------------------------
# elementwise arithmetic


class _Add(Function):
    def forward(self, a, b):
        _broadcast_shape("add", a.shape, b.shape)
        return a + b

    def backward(self, g, needs):
        a, b = self.inputs
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)


class _Sub(Function):
    def forward(self, a, b):
        _broadcast_shape("sub", a.shape, b.shape)
        return a - b

    def backward(self, g, needs):
        a, b = self.inputs
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(neg(g), b.shape) if needs[1] else None)


class _Mul(Function):
    def forward(self, a, b):
        _broadcast_shape("mul", a.shape, b.shape)
        return a * b

    def backward(self, g, needs):
        a, b = self.inputs
        return (sum_to(g * b, a.shape) if needs[0] else None,
                sum_to(g * a, b.shape) if needs[1] else None)


class _Div(Function):
    def forward(self, a, b):
        _broadcast_shape("div", a.shape, b.shape)
        return a / b

    def backward(self, g, needs):
        a, b = self.inputs
        ga = sum_to(g / b, a.shape) if needs[0] else None
        gb = sum_to(neg(g * a / (b * b)), b.shape) if needs[1] else None
        return ga, gb


class _Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g, needs):
        return (neg(g),)


class _Pow(Function):
    def __init__(self, inputs, p: float):
        super().__init__(inputs)
        self.p = p

    def forward(self, a):
        return a ** self.p

    def backward(self, g, needs):
        (a,) = self.inputs
        if self.p == 1:
            return (g,)
        return (g * (a ** (self.p - 1)) * self.p,)


class _Exp(Function):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g, needs):
        return (g * exp(self.inputs[0]),)


class _Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, g, needs):
        return (g / self.inputs[0],)


class _Tanh(Function):
    def forward(self, a):
        return np.tanh(a)

    def backward(self, g, needs):
        t = tanh(self.inputs[0])
        return (g * (1.0 - t * t),)


class _Sigmoid(Function):
    def forward(self, a):
        return 0.5 * (np.tanh(0.5 * a) + 1.0)

    def backward(self, g, needs):
        s = sigmoid(self.inputs[0])
        return (g * s * (1.0 - s),)


class _Sqrt(Function):
    """Square root whose derivative at 0 is taken as 0 (subgradient of a norm)."""

    def forward(self, a):
        return np.sqrt(a)

    def backward(self, g, needs):
        (a,) = self.inputs
        zero = a.data == 0
        safe = a + Tensor(zero.astype(a.dtype), dtype=a.dtype)
        mask = Tensor((~zero).astype(a.dtype), dtype=a.dtype)
        return (g * mask * 0.5 / sqrt(safe),)


# ---------------------------------------------------------------------------
# shape ops


class _Reshape(Function):
    def __init__(self, inputs, shape):
        super().__init__(inputs)
        self.shape = tuple(shape)

    def forward(self, a):
        try:
            return a.reshape(self.shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} into {self.shape}") from None

    def backward(self, g, needs):
        return (reshape(g, self.inputs[0].shape),)


class _Transpose(Function):
    def __init__(self, inputs, axes):
        super().__init__(inputs)
        self.axes = tuple(axes)

    def forward(self, a):
        return np.transpose(a, self.axes)

    def backward(self, g, needs):
        return (transpose(g, tuple(np.argsort(self.axes))),)


class _BroadcastTo(Function):
    def __init__(self, inputs, shape):
        super().__init__(inputs)
        self.shape = tuple(shape)

    def forward(self, a):
        try:
            return np.broadcast_to(a, self.shape)
        except ValueError:
            raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {self.shape}") from None

    def backward(self, g, needs):
        return (sum_to(g, self.inputs[0].shape),)


class _SumTo(Function):
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast_to)."""

    def __init__(self, inputs, shape):
        super().__init__(inputs)
        self.shape = tuple(shape)

    def forward(self, a):
        lead = a.ndim - len(self.shape)
        axes = tuple(range(lead)) + tuple(
            lead + i for i, n in enumerate(self.shape) if n == 1 and a.shape[lead + i] != 1)
        out = a.sum(axis=axes, keepdims=True) if axes else a
        if lead:
            out = out.reshape(out.shape[lead:])
        return out.reshape(self.shape)

    def backward(self, g, needs):
        return (broadcast_to(g, self.inputs[0].shape),)


class _Sum(Function):
    def __init__(self, inputs, axis, keepdims):
        super().__init__(inputs)
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        return np.asarray(a.sum(axis=self.axis, keepdims=self.keepdims))

    def backward(self, g, needs):
        shape = self.inputs[0].shape
        if not self.keepdims and self.axis is not None:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            kshape = list(shape)
            for ax in axes:
                kshape[ax % len(shape)] = 1
            g = reshape(g, tuple(kshape))
        return (broadcast_to(g, shape),)


class _GetItem(Function):
    def __init__(self, inputs, index):
        super().__init__(inputs)
        self.index = index

    def forward(self, a):
        return np.ascontiguousarray(a[self.index])

    def backward(self, g, needs):
        return (_Scatter.apply(g, index=self.index, shape=self.inputs[0].shape),)


class _Scatter(Function):
    """Place ``g`` into a zero tensor at ``index`` (adjoint of basic slicing)."""

    def __init__(self, inputs, index, shape):
        super().__init__(inputs)
        self.index = index
        self.shape = shape

    def forward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        out[self.index] = g
        return out

    def backward(self, g, needs):
        return (_GetItem.apply(g, index=self.index),)


class _Concat(Function):
    def __init__(self, inputs, axis):
        super().__init__(inputs)
        self.axis = axis

    def forward(self, *arrays):
        ref = arrays[0].shape
        for a in arrays[1:]:
            if a.ndim != len(ref) or any(
                    x != y for i, (x, y) in enumerate(zip(a.shape, ref)) if i != self.axis % len(ref)):
                raise ShapeError(f"concat: shape {a.shape} incompatible with {ref} on axis {self.axis}")
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, g, needs):
        out, start = [], 0
        ax = self.axis % g.ndim
        for t, need in zip(self.inputs, needs):
            n = t.shape[ax]
            if need:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(start, start + n)
                out.append(_GetItem.apply(g, index=tuple(idx)))
            else:
                out.append(None)
            start += n
        return out


# ---------------------------------------------------------------------------
# linear algebra


class _MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} not aligned "
                             f"(inner dims {a.shape[-1]} vs {b.shape[0]})")
        return a @ b

    def backward(self, g, needs):
        a, b = self.inputs
        ga = matmul(g, transpose(b, (1, 0))) if needs[0] else None
        gb = matmul(transpose(a, (1, 0)), g) if needs[1] else None
        return ga, gb


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


class _Im2Col(Function):
    """(N,H,W,C) -> (N,Ho,Wo,kh*kw*C) patch extraction, zero padded."""

    def __init__(self, inputs, k, stride, pad):
        super().__init__(inputs)
        self.k, self.stride, self.pad = k, stride, pad

    def forward(self, x):
        return im2col_array(x, self.k, self.stride, self.pad)

    def backward(self, g, needs):
        return (_Col2Im.apply(g, k=self.k, stride=self.stride, pad=self.pad,
                              shape=self.inputs[0].shape),)


class _Col2Im(Function):
    """Adjoint of :class:`_Im2Col`: scatter-add patches back into an image."""

    def __init__(self, inputs, k, stride, pad, shape):
        super().__init__(inputs)
        self.k, self.stride, self.pad, self.shape = k, stride, pad, tuple(shape)

    def forward(self, cols):
        return col2im_array(cols, self.shape, self.k, self.stride, self.pad)

    def backward(self, g, needs):
        return (_Im2Col.apply(g, k=self.k, stride=self.stride, pad=self.pad),)


def im2col_array(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, h, w, c = x.shape
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"im2col: kernel {k} larger than padded input {h}x{w} (pad {pad})")
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    x = np.ascontiguousarray(x)
    sn, sh, sw, sc = x.strides
    win = as_strided(x, shape=(n, ho, wo, k, k, c),
                     strides=(sn, sh * stride, sw * stride, sh, sw, sc), writeable=False)
    return win.reshape(n, ho, wo, k * k * c)


def col2im_array(cols: np.ndarray, shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    n, h, w, c = shape
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    if cols.shape != (n, ho, wo, k * k * c):
        raise ShapeError(f"col2im: columns {cols.shape} do not match image {shape} "
                         f"with kernel {k}, stride {stride}, pad {pad}")
    cols = cols.reshape(n, ho, wo, k, k, c)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, i:i + hs:stride, j:j + ws:stride, :] += cols[:, :, :, i, j, :]
    if pad:
        out = out[:, pad:pad + h, pad:pad + w, :]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# functional API


def add(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) else _const(a, b)
    return _Add.apply(a, _const(b, a))


def sub(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) else _const(a, b)
    return _Sub.apply(a, _const(b, a))


def mul(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) else _const(a, b)
    return _Mul.apply(a, _const(b, a))


def div(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) else _const(a, b)
    return _Div.apply(a, _const(b, a))


def neg(a: Tensor) -> Tensor:
    return _Neg.apply(a)


def pow(a: Tensor, p: float) -> Tensor:  # noqa: A001
    return _Pow.apply(a, p=float(p))


def exp(a: Tensor) -> Tensor:
    return _Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return _Log.apply(a)


def tanh(a: Tensor) -> Tensor:
    return _Tanh.apply(a)


def sigmoid(a: Tensor) -> Tensor:
    return _Sigmoid.apply(a)


def sqrt(a: Tensor) -> Tensor:
    return _Sqrt.apply(a)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if shape == a.shape:
        return a
    return _Reshape.apply(a, shape=shape)


def transpose(a: Tensor, axes) -> Tensor:
    return _Transpose.apply(a, axes=tuple(axes))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if shape == a.shape:
        return a
    return _BroadcastTo.apply(a, shape=shape)


def sum_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if shape == a.shape:
        return a
    return _SumTo.apply(a, shape=shape)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if isinstance(axis, list):
        axis = tuple(axis)
    return _Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum(a, axis, keepdims) * (1.0 / count)


def getitem(a: Tensor, index) -> Tensor:
    return _GetItem.apply(a, index=index)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return _Concat.apply(*tensors, axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _MatMul.apply(a, b)


def im2col(x: Tensor, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"im2col: expected NHWC input, got shape {x.shape}")
    return _Im2Col.apply(x, k=k, stride=stride, pad=pad)


def col2im(cols: Tensor, shape, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    return _Col2Im.apply(cols, k=k, stride=stride, pad=pad, shape=tuple(shape))


# -- layers -----------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    y = matmul(x, w)
    return y if b is None else y + b


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           pad: int = 0) -> Tensor:
    """NHWC convolution; ``w`` has shape (k, k, C_in, C_out)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} / kernel {w.shape} must be NHWC / (k,k,Cin,Cout)")
    if x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input has {x.shape[3]} channels, kernel expects {w.shape[2]}")
    k, cout = w.shape[0], w.shape[3]
    cols = im2col(x, k, stride, pad)
    n, ho, wo, kk = cols.shape
    y = matmul(reshape(cols, (n * ho * wo, kk)), reshape(w, (kk, cout)))
    y = reshape(y, (n, ho, wo, cout))
    return y if b is None else y + b


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
                     pad: int = 0) -> Tensor:
    """NHWC transposed convolution; ``w`` has shape (C_in, k, k, C_out).

    Output spatial size is ``(H - 1) * stride - 2 * pad + k``.
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != w.shape[2]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} / kernel {w.shape} must be NHWC / (Cin,k,k,Cout)")
    if x.shape[3] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input has {x.shape[3]} channels, kernel expects {w.shape[0]}")
    n, h, wd, cin = x.shape
    k, cout = w.shape[1], w.shape[3]
    ho, wo = (h - 1) * stride - 2 * pad + k, (wd - 1) * stride - 2 * pad + k
    cols = matmul(reshape(x, (n * h * wd, cin)), reshape(w, (cin, k * k * cout)))
    y = col2im(reshape(cols, (n, h, wd, k * k * cout)), (n, ho, wo, cout), k, stride, pad)
    return y if b is None else y + b


def relu(x: Tensor) -> Tensor:
    return x * Tensor((x.data > 0).astype(x.dtype), dtype=x.dtype)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return x * Tensor(np.where(x.data > 0, 1.0, slope).astype(x.dtype), dtype=x.dtype)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, NHWC. Ties route the gradient to the first max."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial dims {h}x{w} must be even")
    blocks = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    arg = blocks.reshape(n, h // 2, w // 2, c, 4).argmax(-1)
    onehot = np.zeros((n, h // 2, w // 2, c, 4), dtype=x.dtype)
    np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
    mask = onehot.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape)
    picked = x * Tensor(np.ascontiguousarray(mask), dtype=x.dtype)
    return sum(reshape(picked, (n, h // 2, 2, w // 2, 2, c)), axis=(2, 4))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(x.data.max(axis=axis, keepdims=True), dtype=x.dtype)
    e = exp(x - shift)
    return e / sum(e, axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(x.data.max(axis=axis, keepdims=True), dtype=x.dtype)
    z = x - shift
    return z - log(sum(exp(z), axis=axis, keepdims=True))


def l2_norm(x: Tensor, axis=None) -> Tensor:
    """Euclidean norm over ``axis`` (all axes when None)."""
    return sqrt(sum(x * x, axis=axis))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes, eps: float = 1e-5) -> Tensor:
    """Normalize with batch statistics over ``axes`` then scale and shift."""
    mu = mean(x, axis=axes, keepdims=True)
    d = x - mu
    var = mean(d * d, axis=axes, keepdims=True)
    return d / sqrt(var + eps) * gamma + beta


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep, dtype=x.dtype)


def gaussian_noise(x: Tensor, std: float, rng: np.random.Generator) -> Tensor:
    if std == 0:
        return x
    return x + Tensor(rng.normal(0.0, std, size=x.shape).astype(x.dtype), dtype=x.dtype)


# ---------------------------------------------------------------------------
# operator sugar


def _reshape_method(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = shape[0]
    return reshape(a, shape)


def _bind():
    T = Tensor
    T.__add__ = lambda a, b: add(a, b)
    T.__radd__ = lambda a, b: add(b, a)
    T.__sub__ = lambda a, b: sub(a, b)
    T.__rsub__ = lambda a, b: sub(b, a)
    T.__mul__ = lambda a, b: mul(a, b)
    T.__rmul__ = lambda a, b: mul(b, a)
    T.__truediv__ = lambda a, b: div(a, b)
    T.__rtruediv__ = lambda a, b: div(b, a)
    T.__neg__ = lambda a: neg(a)
    T.__pow__ = lambda a, p: pow(a, p)
    T.__matmul__ = lambda a, b: matmul(a, b)
    T.__getitem__ = lambda a, idx: getitem(a, idx)
    T.reshape = _reshape_method
    T.sum = lambda a, axis=None, keepdims=False: sum(a, axis, keepdims)
    T.mean = lambda a, axis=None, keepdims=False: mean(a, axis, keepdims)
    T.T = property(lambda a: transpose(a, tuple(range(a.ndim))[::-1]))


_bind()


# registry used by ``forward_op`` and the per-op gradient checks
OPS = {
    "add": add,
    "multiply": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "maxpool2x2": maxpool2x2,
    "dense": dense,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log": log,
    "exp": exp,
    "mean": mean,
    "sum": sum,
    "l2_norm": l2_norm,
    "reshape": reshape,
    "concat": lambda *ts, axis=0: concat(ts, axis),
    "batch_norm": batch_norm,
    "dropout": dropout,
    "gaussian_noise": gaussian_noise,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Apply the op registered as ``kind`` to ``inputs``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)
