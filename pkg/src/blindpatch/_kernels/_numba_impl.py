"""Numba-compiled kernel implementations (naive loops, JIT-cached)."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d(x, w, b, stride, pad):
    bn, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((bn, ho, wo, cout))
    for n in range(bn):
        for i in range(ho):
            ib = i * stride - pad
            for j in range(wo):
                jb = j * stride - pad
                for ki in range(kh):
                    yy = ib + ki
                    if yy < 0 or yy >= h:
                        continue
                    for kj in range(kw):
                        xx = jb + kj
                        if xx < 0 or xx >= wd:
                            continue
                        for ci in range(cin):
                            v = x[n, yy, xx, ci]
                            for co in range(cout):
                                y[n, i, j, co] += v * w[ki, kj, ci, co]
    for n in range(bn):
        for i in range(ho):
            for j in range(wo):
                for co in range(cout):
                    y[n, i, j, co] += b[co]
    return y


@njit(cache=True)
def conv2d_grad_input(gy, w, stride, pad, h, wd):
    bn, ho, wo, cout = gy.shape
    kh, kw, cin, _ = w.shape
    gx = np.zeros((bn, h, wd, cin))
    for n in range(bn):
        for i in range(ho):
            ib = i * stride - pad
            for j in range(wo):
                jb = j * stride - pad
                for ki in range(kh):
                    yy = ib + ki
                    if yy < 0 or yy >= h:
                        continue
                    for kj in range(kw):
                        xx = jb + kj
                        if xx < 0 or xx >= wd:
                            continue
                        for ci in range(cin):
                            acc = 0.0
                            for co in range(cout):
                                acc += gy[n, i, j, co] * w[ki, kj, ci, co]
                            gx[n, yy, xx, ci] += acc
    return gx


@njit(cache=True)
def conv2d_grad_weights(x, gy, stride, pad, kh, kw):
    bn, h, wd, cin = x.shape
    _, ho, wo, cout = gy.shape
    gw = np.zeros((kh, kw, cin, cout))
    gb = np.zeros(cout)
    for n in range(bn):
        for i in range(ho):
            ib = i * stride - pad
            for j in range(wo):
                jb = j * stride - pad
                for ki in range(kh):
                    yy = ib + ki
                    if yy < 0 or yy >= h:
                        continue
                    for kj in range(kw):
                        xx = jb + kj
                        if xx < 0 or xx >= wd:
                            continue
                        for ci in range(cin):
                            v = x[n, yy, xx, ci]
                            for co in range(cout):
                                gw[ki, kj, ci, co] += v * gy[n, i, j, co]
    for n in range(bn):
        for i in range(ho):
            for j in range(wo):
                for co in range(cout):
                    gb[co] += gy[n, i, j, co]
    return gw, gb


@njit(cache=True)
def bilinear_gather(img, ys, xs):
    h, wd, c = img.shape
    n = ys.shape[0]
    out = np.empty((n, c))
    for k in range(n):
        y = min(max(ys[k], 0.0), h - 1.0)
        x = min(max(xs[k], 0.0), wd - 1.0)
        y0 = int(np.floor(y))
        x0 = int(np.floor(x))
        y1 = min(y0 + 1, h - 1)
        x1 = min(x0 + 1, wd - 1)
        fy = y - y0
        fx = x - x0
        for ch in range(c):
            # nested lerps: exact for constant images
            top = img[y0, x0, ch] + fx * (img[y0, x1, ch] - img[y0, x0, ch])
            bot = img[y1, x0, ch] + fx * (img[y1, x1, ch] - img[y1, x0, ch])
            out[k, ch] = top + fy * (bot - top)
    return out


@njit(cache=True)
def bilinear_scatter(gvals, ys, xs, h, wd):
    n, c = gvals.shape
    g = np.zeros((h, wd, c))
    for k in range(n):
        y = min(max(ys[k], 0.0), h - 1.0)
        x = min(max(xs[k], 0.0), wd - 1.0)
        y0 = int(np.floor(y))
        x0 = int(np.floor(x))
        y1 = min(y0 + 1, h - 1)
        x1 = min(x0 + 1, wd - 1)
        fy = y - y0
        fx = x - x0
        for ch in range(c):
            gv = gvals[k, ch]
            g[y0, x0, ch] += (1.0 - fy) * (1.0 - fx) * gv
            g[y0, x1, ch] += (1.0 - fy) * fx * gv
            g[y1, x0, ch] += fy * (1.0 - fx) * gv
            g[y1, x1, ch] += fy * fx * gv
    return g
