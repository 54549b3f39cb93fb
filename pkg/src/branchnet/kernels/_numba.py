"""numba-compiled versions of the hot kernels.

Same signatures and results as ``_numpy``; loops are serial so results are
reproducible regardless of thread settings.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _im2col(xp, kh, kw, stride, out):
    n, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    r = 0
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                col = 0
                for i in range(kh):
                    ih = oh * stride + i
                    for j in range(kw):
                        iw = ow * stride + j
                        for ch in range(c):
                            out[r, col] = xp[b, ih, iw, ch]
                            col += 1
                r += 1


def im2col(xp, kh, kw, stride):
    n, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.empty((n * ho * wo, kh * kw * c), dtype=xp.dtype)
    _im2col(np.ascontiguousarray(xp), kh, kw, stride, out)
    return out


@njit(cache=True)
def _col2im(cols, kh, kw, stride, out):
    n, hp, wp, c = out.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    r = 0
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                col = 0
                for i in range(kh):
                    ih = oh * stride + i
                    for j in range(kw):
                        iw = ow * stride + j
                        for ch in range(c):
                            out[b, ih, iw, ch] += cols[r, col]
                            col += 1
                r += 1


def col2im(cols, xp_shape, kh, kw, stride):
    out = np.zeros(xp_shape, dtype=cols.dtype)
    _col2im(np.ascontiguousarray(cols), kh, kw, stride, out)
    return out


@njit(cache=True)
def _maxpool_fwd(xp, k, stride, out, arg):
    n, ho, wo, c = out.shape
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                for ch in range(c):
                    best = xp[b, oh * stride, ow * stride, ch]
                    besti = 0
                    for i in range(k):
                        for j in range(k):
                            v = xp[b, oh * stride + i, ow * stride + j, ch]
                            if v > best:
                                best = v
                                besti = i * k + j
                    out[b, oh, ow, ch] = best
                    arg[b, oh, ow, ch] = besti


def maxpool_forward(xp, k, stride):
    n, hp, wp, c = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    out = np.empty((n, ho, wo, c), dtype=xp.dtype)
    arg = np.empty((n, ho, wo, c), dtype=np.int64)
    _maxpool_fwd(np.ascontiguousarray(xp), k, stride, out, arg)
    return out, arg


@njit(cache=True)
def _maxpool_bwd(grad, arg, k, stride, out):
    n, ho, wo, c = grad.shape
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                for ch in range(c):
                    a = arg[b, oh, ow, ch]
                    out[b, oh * stride + a // k, ow * stride + a % k, ch] += grad[b, oh, ow, ch]


def maxpool_backward(grad, arg, xp_shape, k, stride):
    out = np.zeros(xp_shape, dtype=grad.dtype)
    _maxpool_bwd(np.ascontiguousarray(grad), arg, k, stride, out)
    return out


@njit(cache=True)
def _warp_fwd(x, valid, y0, x0, fy, fx, out):
    n, h, w, c = x.shape
    for oh in range(h):
        for ow in range(w):
            if not valid[oh, ow]:
                continue
            ya = y0[oh, ow]
            xa = x0[oh, ow]
            yb = min(ya + 1, h - 1)
            xb = min(xa + 1, w - 1)
            wy = fy[oh, ow]
            wx = fx[oh, ow]
            w00 = (1.0 - wy) * (1.0 - wx)
            w01 = (1.0 - wy) * wx
            w10 = wy * (1.0 - wx)
            w11 = wy * wx
            for b in range(n):
                for ch in range(c):
                    acc = w00 * x[b, ya, xa, ch]
                    if w01 != 0.0:
                        acc += w01 * x[b, ya, xb, ch]
                    if w10 != 0.0:
                        acc += w10 * x[b, yb, xa, ch]
                    if w11 != 0.0:
                        acc += w11 * x[b, yb, xb, ch]
                    out[b, oh, ow, ch] = acc


def warp_forward(x, table):
    valid, y0, x0, fy, fx = table
    out = np.zeros(x.shape, dtype=x.dtype)
    _warp_fwd(np.ascontiguousarray(x), valid, y0, x0, fy, fx, out)
    return out


@njit(cache=True)
def _warp_bwd(grad, valid, y0, x0, fy, fx, out):
    n, h, w, c = grad.shape
    for oh in range(h):
        for ow in range(w):
            if not valid[oh, ow]:
                continue
            ya = y0[oh, ow]
            xa = x0[oh, ow]
            yb = min(ya + 1, h - 1)
            xb = min(xa + 1, w - 1)
            wy = fy[oh, ow]
            wx = fx[oh, ow]
            w00 = (1.0 - wy) * (1.0 - wx)
            w01 = (1.0 - wy) * wx
            w10 = wy * (1.0 - wx)
            w11 = wy * wx
            for b in range(n):
                for ch in range(c):
                    g = grad[b, oh, ow, ch]
                    out[b, ya, xa, ch] += w00 * g
                    out[b, ya, xb, ch] += w01 * g
                    out[b, yb, xa, ch] += w10 * g
                    out[b, yb, xb, ch] += w11 * g


def warp_backward(grad, table):
    valid, y0, x0, fy, fx = table
    acc = np.zeros(grad.shape, dtype=np.float64)
    _warp_bwd(np.ascontiguousarray(grad), valid, y0, x0, fy, fx, acc)
    return acc.astype(grad.dtype)
