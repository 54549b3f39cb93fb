"""Differentiable operations on :class:`~branchnet.tensor.Tensor`.

Each op computes its forward value with numpy (or a kernel from
:mod:`branchnet.kernels`) and hands a closure for the backward pass to
:func:`~branchnet.tensor.make_result`.
"""

from typing import Optional, Sequence

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, make_result


def _as_tensor(v, like: Tensor) -> Tensor:
    if isinstance(v, Tensor):
        return v
    return Tensor(np.full((1, 1, 1, 1), v, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _broadcast_shape(op, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _broadcast_shape("add", a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", (a, b), out, backward)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result("mul", (a, b), out, backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (out > 0),)

    return make_result("relu", (x,), out, backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype).reshape(1, 1, 1, 1)

    def backward(g):
        return (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype),)

    return make_result("sum", (x,), out, backward)


def mean_all(x: Tensor) -> Tensor:
    return mul(sum_all(x), 1.0 / x.data.size)


def _pad(x: np.ndarray, pad: int, value=0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), constant_values=value)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding; ``weight`` is kh x kw x cin x cout."""
    kh, kw, cin, cout = weight.shape
    if x.channels != cin:
        raise ShapeError(f"conv2d: input has {x.channels} channels but weight expects {cin}")
    if pad < 0 or stride < 1:
        raise ShapeError(f"conv2d: invalid stride={stride} / pad={pad}")
    if bias is not None and bias.shape != (1, 1, 1, cout):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != (1, 1, 1, {cout})")
    n, h, w, _ = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    w2 = weight.data.reshape(kh * kw * cin, cout)
    pointwise = kh == 1 and kw == 1 and pad == 0

    def _cols():
        if pointwise:
            xs = x.data[:, ::stride, ::stride, :] if stride > 1 else x.data
            return np.ascontiguousarray(xs).reshape(n * ho * wo, cin)
        return kernels.im2col(_pad(x.data, pad), kh, kw, stride)

    out = (_cols() @ w2).reshape(n, ho, wo, cout)
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (_cols().T @ g2).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0, dtype=np.float64).astype(bias.dtype).reshape(bias.shape)
        if x.requires_grad:
            gcols = g2 @ w2.T
            if pointwise:
                gx = np.zeros(x.shape, dtype=g.dtype)
                gx[:, ::stride, ::stride, :] = gcols.reshape(n, ho, wo, cin)
            else:
                gxp = kernels.col2im(gcols, (n, hp, wp, cin), kh, kw, stride)
                gx = gxp[:, pad:pad + h, pad:pad + w, :] if pad else gxp
        return gx, gw, gb

    return make_result("conv2d", (x, weight, bias), out, backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Dense layer on the channel axis (a 1x1 convolution)."""
    return conv2d(x, weight, bias)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over rows, height and width.

    In training mode the running statistics are updated in place as
    ``(1 - momentum) * old + momentum * batch`` (biased batch variance).
    """
    c = x.channels
    if gamma.shape != (1, 1, 1, c) or beta.shape != (1, 1, 1, c):
        raise ShapeError(f"batchnorm: gamma/beta must be (1, 1, 1, {c}), got {gamma.shape} / {beta.shape}")
    xd = x.data.astype(np.float64)
    if training:
        mu = xd.mean(axis=(0, 1, 2))
        var = xd.var(axis=(0, 1, 2))
        running_mean[...] = (1.0 - momentum) * running_mean.astype(np.float64) + momentum * mu
        running_var[...] = (1.0 - momentum) * running_var.astype(np.float64) + momentum * var
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    g64 = gamma.data.reshape(c).astype(np.float64)
    out = (xhat * g64 + beta.data.reshape(c)).astype(x.dtype)

    def backward(g):
        gd = g.astype(np.float64)
        dgamma = (gd * xhat).sum(axis=(0, 1, 2))
        dbeta = gd.sum(axis=(0, 1, 2))
        if training:
            m = xd.size // c
            dx = (g64 * inv / m) * (m * gd - dbeta - xhat * dgamma)
        else:
            dx = gd * (g64 * inv)
        return (
            dx.astype(x.dtype),
            dgamma.reshape(1, 1, 1, c).astype(gamma.dtype),
            dbeta.reshape(1, 1, 1, c).astype(beta.dtype),
        )

    return make_result("batchnorm", (x, gamma, beta), out, backward)


def maxpool(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    xp = _pad(x.data, pad, value=-np.inf)
    out, arg = kernels.maxpool_forward(xp, k, stride)
    n, h, w, c = x.shape

    def backward(g):
        gxp = kernels.maxpool_backward(np.ascontiguousarray(g), arg, xp.shape, k, stride)
        return (gxp[:, pad:pad + h, pad:pad + w, :] if pad else gxp,)

    return make_result("maxpool", (x,), out, backward)


def avgpool(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Average over k x k windows; zero padding counts toward the divisor."""
    n, h, w, c = x.shape
    xp = _pad(x.data, pad)
    cols = kernels.im2col(xp, k, k, stride)
    ho = (xp.shape[1] - k) // stride + 1
    wo = (xp.shape[2] - k) // stride + 1
    out = cols.reshape(n * ho * wo, k * k, c).mean(axis=1, dtype=np.float64).astype(x.dtype).reshape(n, ho, wo, c)

    def backward(g):
        gcols = np.repeat(g.reshape(n * ho * wo, 1, c) / (k * k), k * k, axis=1).reshape(n * ho * wo, k * k * c)
        gxp = kernels.col2im(gcols.astype(g.dtype), xp.shape, k, k, stride)
        return (gxp[:, pad:pad + h, pad:pad + w, :] if pad else gxp,)

    return make_result("avgpool", (x,), out, backward)


def _mirror_sum(xd: np.ndarray) -> np.ndarray:
    # sums columns w and W-1-w first so the total is bit-identical under a flip
    w = xd.shape[2]
    half = w // 2
    total = (xd[:, :, :half, :] + xd[:, :, ::-1, :][:, :, :half, :]).sum(axis=(1, 2))
    if w % 2:
        total = total + xd[:, :, half, :].sum(axis=1)
    return total


def global_avgpool(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    out = (_mirror_sum(x.data.astype(np.float64)) / (h * w)).astype(x.dtype).reshape(n, 1, 1, c)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)

    return make_result("global_avgpool", (x,), out, backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over channels, returned in float64."""
    z = x.data.astype(np.float64)
    z = z - z.max(axis=3, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=3, keepdims=True)

    def backward(g):
        g = g.astype(np.float64)
        gx = p * (g - (g * p).sum(axis=3, keepdims=True))
        return (gx.astype(x.dtype),)

    return make_result("softmax", (x,), p, backward)


def flip_h(x: Tensor) -> Tensor:
    out = np.ascontiguousarray(x.data[:, :, ::-1, :])

    def backward(g):
        return (np.ascontiguousarray(g[:, :, ::-1, :]),)

    return make_result("flip_h", (x,), out, backward)


def warp(x: Tensor, table) -> Tensor:
    """Apply a precomputed bilinear sampling table (see transforms.warp_table)."""
    if table[0].shape != (x.height, x.width):
        raise ShapeError(f"warp: table is for {table[0].shape}, input is {x.height}x{x.width}")
    out = kernels.warp_forward(x.data, table)

    def backward(g):
        return (kernels.warp_backward(np.ascontiguousarray(g), table),)

    return make_result("warp_bilinear", (x,), out, backward)


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_rows: empty input list")
    tail = xs[0].shape[1:]
    for t in xs:
        if t.shape[1:] != tail:
            raise ShapeError(f"concat_rows: mismatched dims {t.shape[1:]} vs {tail}")
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([t.data for t in xs], axis=0)
    bounds = np.cumsum([0] + [t.rows for t in xs])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_result("concat_rows", tuple(xs), out, backward)


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.rows:
        raise ShapeError(f"take_rows: [{start}, {stop}) out of range for {x.rows} rows")
    out = x.data[start:stop].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return make_result("take_rows", (x,), out, backward)
