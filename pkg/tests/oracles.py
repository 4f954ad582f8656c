"""Independent brute-force references, written with plain loops on purpose."""

import math

import numpy as np


def bilinear_point(f, u, v):
    """Bilinear value of ``f`` (H x W x C) at normalised (u, v); zero outside the grid."""
    h, w, c = f.shape
    x = u * w - 0.5
    y = v * h - 0.5
    xf, yf = math.floor(x), math.floor(y)
    out = np.zeros(c)
    for yi in (yf, yf + 1):
        for xi in (xf, xf + 1):
            wgt = (1 - abs(x - xi)) * (1 - abs(y - yi))
            if 0 <= yi < h and 0 <= xi < w:
                out += wgt * f[yi, xi]
    return out


def resize_oracle(f, out_h, out_w):
    """Align-corners-false resize with source coordinates clamped to the grid."""
    h, w, c = f.shape
    out = np.zeros((out_h, out_w, c))
    for i in range(out_h):
        for j in range(out_w):
            x = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            y = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
            out[i, j] = bilinear_point(f, (x + 0.5) / w, (y + 0.5) / h)
    return out


def msda_degenerate_oracle(levels):
    """Zero offsets, one point, uniform attention, identity projections.

    ``levels`` is a list of H_l x W_l x C maps; returns T_total x C where each
    query's output is the mean over scales of the map sampled at the query's
    own cell centre.
    """
    rows = []
    for f in levels:
        h, w, _ = f.shape
        for i in range(h):
            for j in range(w):
                u, v = (j + 0.5) / w, (i + 0.5) / h
                rows.append(sum(bilinear_point(g, u, v) for g in levels) / len(levels))
    return np.array(rows)


def dense_roi_oracle(f, box, samples=100):
    """Average of ``samples x samples`` bilinear samples spread over the box."""
    x0, y0, x1, y1 = box
    acc = np.zeros(f.shape[-1])
    for a in range(samples):
        v = y0 + (a + 0.5) / samples * (y1 - y0)
        for b in range(samples):
            u = x0 + (b + 0.5) / samples * (x1 - x0)
            acc += bilinear_point(f, u, v)
    return acc / samples**2


def conv2d_naive(x, w, b, stride, pad, groups=1):
    n, h, wd, cin = x.shape
    kh, kw, cin_g, cout = w.shape
    cout_g = cout // groups
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for bi in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    g = o // cout_g
                    acc = b[o]
                    for di in range(kh):
                        for dj in range(kw):
                            yi, xi = i * stride + di - pad, j * stride + dj - pad
                            if 0 <= yi < h and 0 <= xi < wd:
                                for c in range(cin_g):
                                    acc += x[bi, yi, xi, g * cin_g + c] * w[di, dj, c, o]
                    out[bi, i, j, o] = acc
    return out
