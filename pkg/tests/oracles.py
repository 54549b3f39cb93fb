"""Slow, loop-based reference implementations used only by the tests.

Nothing here imports the package's kernels; each function restates the
intended semantics directly so the fast paths are checked against an
independent computation.
"""

import math
import struct

import numpy as np

EDGE_TOL = 1e-9


def warp_pixel_oracle(x, src_of):
    """Bilinear inverse-mapping warp, one output pixel at a time.

    ``src_of(i, j)`` returns the (row, col) source point for output pixel
    (i, j). Points outside [0, H-1] x [0, W-1] give an all-zero pixel.
    """
    n, h, w, c = x.shape
    out = np.zeros((n, h, w, c), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            sy, sx = src_of(i, j)
            if sy < -EDGE_TOL or sy > h - 1 + EDGE_TOL or sx < -EDGE_TOL or sx > w - 1 + EDGE_TOL:
                continue
            sy = min(max(sy, 0.0), h - 1.0)
            sx = min(max(sx, 0.0), w - 1.0)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[:, i, j, :] = (
                (1 - fy) * (1 - fx) * x[:, y0, x0, :]
                + (1 - fy) * fx * x[:, y0, x1, :]
                + fy * (1 - fx) * x[:, y1, x0, :]
                + fy * fx * x[:, y1, x1, :]
            )
    return out


def rotation_source(h, w, angle_deg):
    """Source point for clockwise content rotation about the pixel-grid centre."""
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    cy, cx = (h - 1) / 2, (w - 1) / 2

    def src(i, j):
        r, q = i - cy, j - cx
        return cy + c * r - s * q, cx + s * r + c * q

    return src


def scale_source(h, w, factor):
    cy, cx = (h - 1) / 2, (w - 1) / 2

    def src(i, j):
        return cy + (i - cy) / factor, cx + (j - cx) / factor

    return src


def conv2d_oracle(x, weight, bias, stride, pad):
    n, h, w, cin = x.shape
    kh, kw, _, cout = weight.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, cin))
    xp[:, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
            out[:, i, j, :] = np.einsum("nabc,abcd->nd", patch, weight)
    if bias is not None:
        out += bias.reshape(1, 1, 1, cout)
    return out


def pool_oracle(x, k, stride, pad, kind):
    n, h, w, c = x.shape
    fill = -np.inf if kind == "max" else 0.0
    xp = np.full((n, h + 2 * pad, w + 2 * pad, c), fill)
    xp[:, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, ho, wo, c))
    for i in range(ho):
        for j in range(wo):
            win = xp[:, i * stride:i * stride + k, j * stride:j * stride + k, :]
            out[:, i, j, :] = win.max(axis=(1, 2)) if kind == "max" else win.mean(axis=(1, 2))
    return out


def batchnorm_oracle(x, gamma, beta, eps=1e-5):
    c = x.shape[-1]
    out = np.empty_like(x, dtype=np.float64)
    for ch in range(c):
        v = x[..., ch].astype(np.float64)
        mu = v.mean()
        var = ((v - mu) ** 2).mean()
        out[..., ch] = (v - mu) / math.sqrt(var + eps) * gamma[ch] + beta[ch]
    return out


def reduce_oracle(probs_rbc, kind):
    """Per-sample, per-class loop over branches, then L1 normalisation."""
    r, b, c = probs_rbc.shape
    out = np.zeros((b, c))
    for s in range(b):
        for k in range(c):
            col = [float(probs_rbc[i, s, k]) for i in range(r)]
            if kind == "max":
                out[s, k] = max(col)
            elif kind == "sum":
                out[s, k] = sum(col) / r
            elif kind == "geo":
                out[s, k] = math.exp(sum(math.log(max(v, 1e-12)) for v in col) / r)
            elif kind == "vanilla":
                out[s, k] = col[0]
        out[s] /= out[s].sum()
    return out


def softmax_rows(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cifar_record(label, pixels_hwc, coarse=None):
    """One CIFAR binary record built with struct, byte by byte."""
    head = b"" if coarse is None else struct.pack("B", coarse)
    head += struct.pack("B", label)
    body = bytearray()
    for ch in range(3):
        for row in range(32):
            for col in range(32):
                body.append(int(pixels_hwc[row, col, ch]))
    return head + bytes(body)
