"""Differentiable operations used by the network.

All image-like tensors are NHWC; token tensors are N x T x C. Every op is a
:class:`Function` subclass with a hand-written vector-Jacobian product.
"""

from __future__ import annotations

import builtins
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from .tensor import Function, Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair_dtype(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.dtype != b.dtype and not b.requires_grad and b.is_leaf:
        b = Tensor(b.data.astype(a.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise


class Add(Function):
    name = "add"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        ga = _unbroadcast(grad * self.b, self.a.shape) if self.needs_grad[0] else None
        gb = _unbroadcast(grad * self.a, self.b.shape) if self.needs_grad[1] else None
        return ga, gb


def add(a, b) -> Tensor:
    a, b = _pair_dtype(a, b)
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        a = as_tensor(np.asarray(a, dtype=b.dtype))
    a, b = _pair_dtype(a, b)
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    a, b = _pair_dtype(a, b)
    return Mul.apply(a, b)


class Gelu(Function):
    """Exact (erf) GELU."""

    name = "gelu"

    def forward(self, x):
        self.x = x
        self.cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
        return x * self.cdf

    def backward(self, grad):
        pdf = np.exp(-0.5 * self.x * self.x) / np.sqrt(2.0 * np.pi)
        return (grad * (self.cdf + self.x * pdf),)


class Relu(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


def activation(x: Tensor, kind: str = "gelu") -> Tensor:
    if kind == "gelu":
        return Gelu.apply(x)
    if kind == "relu":
        return Relu.apply(x)
    raise ValueError(f"unknown activation {kind!r}")


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


class Dropout(Function):
    name = "dropout"

    def __init__(self, mask):
        self.mask = mask

    def forward(self, x):
        return x * self.mask.astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask.astype(grad.dtype),)


def dropout(x: Tensor, rate: float, seed: int, training: bool = True) -> Tensor:
    """Inverted dropout; the mask depends only on ``seed`` and the shape."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0 or not training:
        return x
    rng = np.random.Generator(np.random.Philox(seed))
    keep = rng.random(x.shape) >= rate
    return Dropout.apply(x, mask=keep / (1.0 - rate))


# ---------------------------------------------------------------- reductions and shape


class Sum(Function):
    name = "sum"

    def __init__(self, axis=None, keepdims=False):
        self.axis, self.keepdims = axis, keepdims

    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(axis=self.axis, keepdims=self.keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


class Reshape(Function):
    name = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape(self.shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


def reshape(x: Tensor, shape) -> Tensor:
    return Reshape.apply(x, shape=shape)


class Transpose(Function):
    name = "transpose"

    def __init__(self, axes):
        self.axes = tuple(axes)

    def forward(self, x):
        return np.ascontiguousarray(x.transpose(self.axes))

    def backward(self, grad):
        return (np.ascontiguousarray(grad.transpose(np.argsort(self.axes))),)


def transpose(x: Tensor, axes) -> Tensor:
    return Transpose.apply(x, axes=axes)


class Concat(Function):
    name = "concat"

    def __init__(self, axis):
        self.axis = axis

    def forward(self, *xs):
        self.sizes = [x.shape[self.axis] for x in xs]
        return np.concatenate(xs, axis=self.axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.ascontiguousarray(g) for g in np.split(grad, cuts, axis=self.axis))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    return Concat.apply(*xs, axis=axis)


class Slice(Function):
    name = "slice"

    def __init__(self, axis, start, stop):
        self.axis, self.start, self.stop = axis, start, stop

    def forward(self, x):
        self.shape = x.shape
        idx = [builtins.slice(None)] * x.ndim
        idx[self.axis] = builtins.slice(self.start, self.stop)
        self.idx = tuple(idx)
        return np.ascontiguousarray(x[self.idx])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        out[self.idx] = grad
        return (out,)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return Slice.apply(x, axis=axis % x.ndim, start=start, stop=stop)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list:
    """Cut ``x`` along ``axis`` into consecutive pieces; inverse of :func:`concat`."""
    if builtins.sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, axis, start, start + s))
        start += s
    return out


# ---------------------------------------------------------------- linear algebra


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        ga = gb = None
        if self.needs_grad[0]:
            ga = _unbroadcast(grad @ np.swapaxes(self.b, -1, -2), self.a.shape)
        if self.needs_grad[1]:
            gb = _unbroadcast(np.swapaxes(self.a, -1, -2) @ grad, self.b.shape)
        return ga, gb


def matmul(a, b) -> Tensor:
    a, b = _pair_dtype(a, b)
    return MatMul.apply(a, b)


class Linear(Function):
    name = "linear"

    def forward(self, x, w, b):
        if x.shape[-1] != w.shape[0]:
            raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
        if b.shape != (w.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        self.x, self.w = x, w
        return x @ w + b

    def backward(self, grad):
        x2 = self.x.reshape(-1, self.x.shape[-1])
        g2 = grad.reshape(-1, grad.shape[-1])
        gx = grad @ self.w.T if self.needs_grad[0] else None
        gw = x2.T @ g2 if self.needs_grad[1] else None
        gb = g2.sum(axis=0) if self.needs_grad[2] else None
        return gx, gw, gb


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return Linear.apply(x, w, b)


# ---------------------------------------------------------------- normalization and softmax


class Softmax(Function):
    name = "softmax"

    def forward(self, x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self.y = e / e.sum(axis=-1, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


def softmax(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    return Softmax.apply(x)


class LayerNorm(Function):
    name = "layer_norm"

    def __init__(self, eps):
        self.eps = eps

    def forward(self, x, gamma, beta):
        if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
            raise ValueError(f"layer_norm: affine shape {gamma.shape} vs width {x.shape[-1]}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + self.eps)
        self.xhat = xc * self.rstd
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, grad):
        d = grad.shape[-1]
        lead = tuple(range(grad.ndim - 1))
        ggamma = (grad * self.xhat).sum(axis=lead)
        gbeta = grad.sum(axis=lead)
        gxhat = grad * self.gamma
        gx = (
            self.rstd
            / d
            * (
                d * gxhat
                - gxhat.sum(axis=-1, keepdims=True)
                - self.xhat * (gxhat * self.xhat).sum(axis=-1, keepdims=True)
            )
        )
        return gx, ggamma, gbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


class BatchNormState:
    """Running statistics for one batch-norm layer; uninitialised until set or trained."""

    def __init__(self, channels: int, dtype=np.float64, initialized: bool = False):
        self.channels = channels
        self.mean: Optional[np.ndarray] = np.zeros(channels, dtype) if initialized else None
        self.var: Optional[np.ndarray] = np.ones(channels, dtype) if initialized else None


class BatchNormTrain(Function):
    name = "batch_norm"

    def __init__(self, eps):
        self.eps = eps

    def forward(self, x, gamma, beta):
        axes = tuple(range(x.ndim - 1))
        self.axes = axes
        self.count = x.size // x.shape[-1]
        self.mu = x.mean(axis=axes)
        xc = x - self.mu
        self.var = (xc * xc).mean(axis=axes)
        self.rstd = 1.0 / np.sqrt(self.var + self.eps)
        self.xhat = xc * self.rstd
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, grad):
        ggamma = (grad * self.xhat).sum(axis=self.axes)
        gbeta = grad.sum(axis=self.axes)
        gxhat = grad * self.gamma
        m = self.count
        gx = (
            self.rstd
            / m
            * (m * gxhat - gxhat.sum(axis=self.axes) - self.xhat * (gxhat * self.xhat).sum(axis=self.axes))
        )
        return gx, ggamma, gbeta


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over every axis but the last.

    ``train`` normalises with batch statistics and folds them into ``state``
    (``running = (1 - momentum) * running + momentum * batch``, unbiased
    variance); ``eval`` uses ``state`` only.
    """
    if mode == "train":
        out = BatchNormTrain.apply(x, gamma, beta, eps=eps)
        axes = tuple(range(x.ndim - 1))
        bm = x.data.mean(axis=axes)
        n = x.data.size // x.shape[-1]
        bv = x.data.var(axis=axes) * (n / max(n - 1, 1))
        if state.mean is None:
            state.mean = np.zeros_like(bm)
            state.var = np.ones_like(bv)
        state.mean = (1.0 - momentum) * state.mean + momentum * bm
        state.var = (1.0 - momentum) * state.var + momentum * bv
        return out
    if mode != "eval":
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    if state.mean is None or state.var is None:
        raise RuntimeError("batch_norm eval mode used before running statistics were initialised")
    if not (np.all(np.isfinite(state.mean)) and np.all(np.isfinite(state.var))):
        raise FloatingPointError("batch_norm running statistics are not finite")
    scale = 1.0 / np.sqrt(state.var + eps)
    x = as_tensor(x)
    xn = mul(sub(x, state.mean.astype(x.dtype)), scale.astype(x.dtype))
    return add(mul(xn, gamma), beta)


# ---------------------------------------------------------------- convolution


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


class Conv2d(Function):
    name = "conv2d"

    def __init__(self, stride, pad, groups):
        self.stride, self.pad, self.groups = stride, pad, groups

    def forward(self, x, w, b):
        n, h, wd, cin = x.shape
        kh, kw, cin_g, cout = w.shape
        g, s, p = self.groups, self.stride, self.pad
        if cin % g or cout % g:
            raise ValueError(f"conv2d: channels {cin}->{cout} not divisible by groups={g}")
        if cin_g != cin // g:
            raise ValueError(f"conv2d: weight expects {cin_g * g} input channels, got {cin}")
        if b.shape != (cout,):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({cout},)")
        ho, wo = _out_extent(h, kh, s, p), _out_extent(wd, kw, s, p)
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d: non-positive output extent {ho}x{wo}")
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        self.xp, self.w = xp, w
        self.out_hw = (ho, wo)
        out = np.zeros((n, ho, wo, cout), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :]
                out += self._mix(xs, w[i, j])
        return out + b

    def _mix(self, xs, wk):
        g = self.groups
        if g == 1:
            return xs @ wk
        n, ho, wo, cin = xs.shape
        cin_g, cout = wk.shape
        xg = xs.reshape(n, ho, wo, g, cin_g)
        wg = wk.reshape(cin_g, g, cout // g)
        return np.einsum("nhwgc,cgo->nhwgo", xg, wg).reshape(n, ho, wo, cout)

    def backward(self, grad):
        xp, w = self.xp, self.w
        kh, kw, cin_g, cout = w.shape
        g, s, p = self.groups, self.stride, self.pad
        ho, wo = self.out_hw
        n = grad.shape[0]
        gxp = np.zeros_like(xp) if self.needs_grad[0] else None
        gw = np.zeros_like(w)
        gg = grad.reshape(n, ho, wo, g, cout // g)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s), slice(None))
                xs = xp[sl]
                if g == 1:
                    gw[i, j] = xs.reshape(-1, xs.shape[-1]).T @ grad.reshape(-1, cout)
                    if gxp is not None:
                        gxp[sl] += grad @ w[i, j].T
                else:
                    xg = xs.reshape(n, ho, wo, g, cin_g)
                    wg = w[i, j].reshape(cin_g, g, cout // g)
                    gw[i, j] = np.einsum("nhwgc,nhwgo->cgo", xg, gg).reshape(cin_g, cout)
                    if gxp is not None:
                        gxp[sl] += np.einsum("nhwgo,cgo->nhwgc", gg, wg).reshape(xs.shape)
        gx = None
        if gxp is not None:
            gx = gxp[:, p : xp.shape[1] - p, p : xp.shape[2] - p, :] if p else gxp
        return gx, gw, grad.sum(axis=(0, 1, 2))


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """NHWC convolution with weights laid out ``Kh x Kw x Cin/groups x Cout``."""
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride={stride} pad={pad}")
    return Conv2d.apply(x, w, b, stride=stride, pad=pad, groups=groups)


class ConvTranspose2d(Function):
    name = "transposed_conv2d"

    def __init__(self, stride, pad):
        self.stride, self.pad = stride, pad

    def forward(self, x, w, b):
        n, h, wd, cin = x.shape
        kh, kw, wcin, cout = w.shape
        s, p = self.stride, self.pad
        if wcin != cin:
            raise ValueError(f"transposed_conv2d: weight expects {wcin} input channels, got {cin}")
        hf, wf = (h - 1) * s + kh, (wd - 1) * s + kw
        ho, wo = hf - 2 * p, wf - 2 * p
        if ho < 1 or wo < 1:
            raise ValueError(f"transposed_conv2d: non-positive output extent {ho}x{wo}")
        self.x, self.w = x, w
        full = np.zeros((n, hf, wf, cout), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                full[:, i : i + s * (h - 1) + 1 : s, j : j + s * (wd - 1) + 1 : s, :] += x @ w[i, j]
        return full[:, p : hf - p, p : wf - p, :] + b

    def backward(self, grad):
        x, w = self.x, self.w
        s, p = self.stride, self.pad
        n, h, wd, cin = x.shape
        kh, kw = w.shape[:2]
        gfull = np.pad(grad, ((0, 0), (p, p), (p, p), (0, 0))) if p else grad
        gx = np.zeros_like(x)
        gw = np.zeros_like(w)
        x2 = x.reshape(-1, cin)
        for i in range(kh):
            for j in range(kw):
                gs = gfull[:, i : i + s * (h - 1) + 1 : s, j : j + s * (wd - 1) + 1 : s, :]
                gx += gs @ w[i, j].T
                gw[i, j] = x2.T @ gs.reshape(-1, gs.shape[-1])
        return gx, gw, grad.sum(axis=(0, 1, 2))


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; weights laid out ``Kh x Kw x Cin x Cout``."""
    if stride < 1 or pad < 0:
        raise ValueError(f"transposed_conv2d: invalid stride={stride} pad={pad}")
    return ConvTranspose2d.apply(x, w, b, stride=stride, pad=pad)


class MaxPool2d(Function):
    name = "max_pool2d"

    def __init__(self, size):
        self.size = size

    def forward(self, x):
        n, h, w, c = x.shape
        k = self.size
        if h % k or w % k:
            raise ValueError(f"max_pool2d: extent {h}x{w} not divisible by {k}")
        win = x.reshape(n, h // k, k, w // k, k, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // k, w // k, c, k * k)
        self.arg = win.argmax(axis=-1)
        self.shape = x.shape
        return np.take_along_axis(win, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, h, w, c = self.shape
        k = self.size
        win = np.zeros((n, h // k, w // k, c, k * k), dtype=grad.dtype)
        np.put_along_axis(win, self.arg[..., None], grad[..., None], axis=-1)
        gx = win.reshape(n, h // k, w // k, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (gx,)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` max pooling with stride ``size``."""
    return MaxPool2d.apply(x, size=size)


# ---------------------------------------------------------------- bilinear sampling


def _corners(h: int, w: int, locs: np.ndarray):
    # normalised (u, v) -> pixel coordinates, align-corners-false
    px = locs[..., 0] * w - 0.5
    py = locs[..., 1] * h - 0.5
    x0 = np.floor(px)
    y0 = np.floor(py)
    ax = px - x0
    ay = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    return x0, y0, ax, ay


def _gather(f: np.ndarray, bidx: np.ndarray, yi: np.ndarray, xi: np.ndarray):
    h, w = f.shape[1:3]
    valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    vals = f[bidx, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return vals * valid[..., None].astype(f.dtype), valid


class GridSample(Function):
    name = "bilinear_sample"

    def forward(self, f, locs):
        b, h, w, c = f.shape
        if locs.shape[0] != b or locs.shape[-1] != 2:
            raise ValueError(f"bilinear_sample: locations {locs.shape} incompatible with feature {f.shape}")
        x0, y0, ax, ay = _corners(h, w, locs)
        bidx = np.arange(b).reshape((b,) + (1,) * (locs.ndim - 2))
        bidx = np.broadcast_to(bidx, x0.shape)
        v00, m00 = _gather(f, bidx, y0, x0)
        v01, m01 = _gather(f, bidx, y0, x0 + 1)
        v10, m10 = _gather(f, bidx, y0 + 1, x0)
        v11, m11 = _gather(f, bidx, y0 + 1, x0 + 1)
        axe, aye = ax[..., None].astype(f.dtype), ay[..., None].astype(f.dtype)
        top = v00 + axe * (v01 - v00)
        bot = v10 + axe * (v11 - v10)
        self.saved = (f.shape, bidx, x0, y0, axe, aye, (v00, v01, v10, v11), (m00, m01, m10, m11))
        return top + aye * (bot - top)

    def backward(self, grad):
        fshape, bidx, x0, y0, ax, ay, (v00, v01, v10, v11), masks = self.saved
        b, h, w, c = fshape
        gf = None
        if self.needs_grad[0]:
            gf = np.zeros(fshape, dtype=grad.dtype)
            weights = ((1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay)
            offsets = ((0, 0), (0, 1), (1, 0), (1, 1))
            for (dy, dx), wgt, m in zip(offsets, weights, masks):
                yi, xi = y0 + dy, x0 + dx
                contrib = grad * wgt
                np.add.at(gf, (bidx[m], yi[m], xi[m]), contrib[m])
        gl = None
        if self.needs_grad[1]:
            dax = ((1 - ay) * (v01 - v00) + ay * (v11 - v10)) * grad
            top = v00 + ax * (v01 - v00)
            bot = v10 + ax * (v11 - v10)
            day = (bot - top) * grad
            gl = np.stack([dax.sum(axis=-1) * w, day.sum(axis=-1) * h], axis=-1)
        return gf, gl


def bilinear_sample(f: Tensor, locs) -> Tensor:
    """Sample ``f`` at normalised ``(u, v)`` locations (``u`` horizontal).

    ``f`` is ``H x W x C`` with ``locs`` of shape ``P x 2``, or batched
    ``B x H x W x C`` with ``B x ... x 2``. Pixel ``(i, j)`` has its centre at
    ``((j + 0.5) / W, (i + 0.5) / H)``; corners outside the grid contribute 0.
    """
    f = as_tensor(f)
    locs = as_tensor(locs, like=f)
    if f.ndim == 3:
        out = GridSample.apply(reshape(f, (1,) + f.shape), reshape(locs, (1,) + locs.shape))
        return reshape(out, out.shape[1:])
    return GridSample.apply(f, locs)


def cell_centers(h: int, w: int) -> np.ndarray:
    """Normalised ``(u, v)`` centres of an ``h x w`` grid, row-major, shape ``h*w x 2``."""
    v, u = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=-1)


def resize_locations(src: Tuple[int, int], dst: Tuple[int, int]) -> np.ndarray:
    """Sampling points for resizing an ``src`` grid to ``dst``.

    Target cell centres mapped align-corners-false, then clamped to the
    outermost source centres so resizing never reads the zero border.
    """
    sh, sw = src
    loc = cell_centers(*dst)
    loc[:, 0] = np.clip(loc[:, 0], 0.5 / sw, 1.0 - 0.5 / sw)
    loc[:, 1] = np.clip(loc[:, 1], 0.5 / sh, 1.0 - 0.5 / sh)
    return loc


def resize_bilinear(x: Tensor, size: Tuple[int, int]) -> Tensor:
    """Bilinear resize of ``N x H x W x C`` (or ``H x W x C``) to ``size``."""
    x = as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    n, h, w, c = x.shape
    if (h, w) == tuple(size):
        out = x
    else:
        loc = resize_locations((h, w), size)
        loc = np.broadcast_to(loc, (n,) + loc.shape).astype(x.dtype)
        out = reshape(GridSample.apply(x, loc), (n, size[0], size[1], c))
    return reshape(out, out.shape[1:]) if squeeze else out


def mse(a: Tensor, b) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))
