"""Pure-numpy kernel implementations (im2col convolutions, vectorized sampling)."""

from __future__ import annotations

import numpy as np


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    b, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, ho, wo, kh, kw, c),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )
    return cols, ho, wo


def conv2d(x, w, b, stride, pad):
    kh, kw = w.shape[0], w.shape[1]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols, _, _ = _im2col(xp, kh, kw, stride)
    y = np.tensordot(cols, w, axes=([3, 4, 5], [0, 1, 2]))
    y += b
    return np.ascontiguousarray(y)


def conv2d_grad_input(gy, w, stride, pad, h, wd):
    b, ho, wo, _ = gy.shape
    kh, kw, cin, _ = w.shape
    # (b, ho, wo, kh, kw, cin), then col2im accumulation over the 9 taps
    gcols = np.tensordot(gy, w, axes=([3], [3]))
    gxp = np.zeros((b, h + 2 * pad, wd + 2 * pad, cin))
    for di in range(kh):
        for dj in range(kw):
            gxp[:, di : di + ho * stride : stride, dj : dj + wo * stride : stride, :] += gcols[
                :, :, :, di, dj, :
            ]
    return np.ascontiguousarray(gxp[:, pad : pad + h, pad : pad + wd, :])


def conv2d_grad_weights(x, gy, stride, pad, kh, kw):
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols, _, _ = _im2col(xp, kh, kw, stride)
    gw = np.tensordot(cols, gy, axes=([0, 1, 2], [0, 1, 2]))
    gb = gy.sum(axis=(0, 1, 2))
    return np.ascontiguousarray(gw), np.ascontiguousarray(gb)


def _corners(ys, xs, h, wd):
    y = np.clip(ys, 0.0, h - 1.0)
    x = np.clip(xs, 0.0, wd - 1.0)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, wd - 1)
    return y0, x0, y1, x1, y - y0, x - x0


def bilinear_gather(img, ys, xs):
    h, wd, _ = img.shape
    y0, x0, y1, x1, fy, fx = _corners(ys, xs, h, wd)
    fy = fy[:, None]
    fx = fx[:, None]
    # nested lerps: exact for constant images
    top = img[y0, x0] + fx * (img[y0, x1] - img[y0, x0])
    bot = img[y1, x0] + fx * (img[y1, x1] - img[y1, x0])
    return top + fy * (bot - top)


def bilinear_scatter(gvals, ys, xs, h, wd):
    c = gvals.shape[1]
    y0, x0, y1, x1, fy, fx = _corners(ys, xs, h, wd)
    fy = fy[:, None]
    fx = fx[:, None]
    g = np.zeros((h, wd, c))
    np.add.at(g, (y0, x0), (1.0 - fy) * (1.0 - fx) * gvals)
    np.add.at(g, (y0, x1), (1.0 - fy) * fx * gvals)
    np.add.at(g, (y1, x0), fy * (1.0 - fx) * gvals)
    np.add.at(g, (y1, x1), fy * fx * gvals)
    return g
