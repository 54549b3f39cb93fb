"""Pure-numpy implementations of the hot kernels.

All arrays are NHWC. These are the reference path and the fallback when
numba is unavailable or ``BRANCHNET_KERNELS=numpy``.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy import sparse


def _windows(xp, kh, kw, stride):
    n, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sh, sw, sc = xp.strides
    return as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )


def im2col(xp, kh, kw, stride):
    n, _, _, c = xp.shape
    win = _windows(np.ascontiguousarray(xp), kh, kw, stride)
    _, ho, wo = win.shape[:3]
    return win.reshape(n * ho * wo, kh * kw * c)


def col2im(cols, xp_shape, kh, kw, stride):
    n, hp, wp, c = xp_shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols6 = cols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += cols6[
                :, :, :, i, j, :
            ]
    return out


def maxpool_forward(xp, k, stride):
    """Max over k x k windows of an already (-inf) padded input.

    Returns the pooled values and the flat in-window argmax (first max wins).
    """
    win = _windows(np.ascontiguousarray(xp), k, k, stride)
    n, ho, wo = win.shape[:3]
    c = xp.shape[3]
    flat = win.reshape(n, ho, wo, k * k, c)
    arg = flat.argmax(axis=3)
    out = np.take_along_axis(flat, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward(grad, arg, xp_shape, k, stride):
    n, ho, wo, c = grad.shape
    onehot = np.zeros((n, ho, wo, k * k, c), dtype=grad.dtype)
    np.put_along_axis(onehot, arg[:, :, :, None, :], grad[:, :, :, None, :], axis=3)
    return col2im(onehot.reshape(n * ho * wo, k * k * c), xp_shape, k, k, stride)


def _warp_matrix(table, h, w):
    valid, y0, x0, fy, fx = table
    rows = []
    cols = []
    vals = []
    out_idx = np.arange(h * w).reshape(h, w)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    for yy, xx, wt in (
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ):
        rows.append(out_idx[valid])
        cols.append((yy * w + xx)[valid])
        vals.append(wt[valid])
    m = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(h * w, h * w)
    )
    # keep explicit zero-weight entries out; they only add 0*x terms
    m = m.tocsr()
    m.eliminate_zeros()
    return m


def warp_forward(x, table):
    n, h, w, c = x.shape
    m = _warp_matrix(table, h, w)
    flat = np.moveaxis(x, 0, 2).reshape(h * w, n * c).astype(np.float64)
    out = m @ flat
    return np.moveaxis(out.reshape(h, w, n, c), 2, 0).astype(x.dtype)


def warp_backward(grad, table):
    n, h, w, c = grad.shape
    m = _warp_matrix(table, h, w)
    flat = np.moveaxis(grad, 0, 2).reshape(h * w, n * c).astype(np.float64)
    out = m.T @ flat
    return np.moveaxis(out.reshape(h, w, n, c), 2, 0).astype(grad.dtype)
