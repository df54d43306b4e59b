"""Tiled direct-convolution kernels over a flat, padded, channel-major layout.

``buf`` is ``[C, L + extra]``; kernel tap ``k`` reads ``buf[c, l + offs[k]]``.
Each kernel accumulates into a small local tile so the inner loop is a
contiguous multiply-add that LLVM vectorizes.
"""
from __future__ import annotations

import numba as nb
import numpy as np

TILE = 512


@nb.njit(cache=True, fastmath=True)
def _gather_conv(src, w, offs, length):
    # out[o, l] = sum_{c,k} w[o, c, k] * src[c, l + offs[k]]
    o_n, c_n, k_n = w.shape
    out = np.zeros((o_n, length))
    acc = np.empty(TILE)
    for t0 in range(0, length, TILE):
        m = min(length, t0 + TILE) - t0
        for o in range(o_n):
            acc[:] = 0.0
            for c in range(c_n):
                row = src[c]
                for k in range(k_n):
                    wv = w[o, c, k]
                    seg = row[t0 + offs[k] : t0 + offs[k] + m]
                    for l in range(m):
                        acc[l] += wv * seg[l]
            out[o, t0 : t0 + m] = acc[:m]
    return out


@nb.njit(cache=True)
def conv_forward(buf, w, offs, length):
    return _gather_conv(buf, w, offs, length)


@nb.njit(cache=True)
def conv_grad_input(g, w, offs, length, extra):
    """Gradient w.r.t. the padded buffer ``[C, length + extra]``."""
    o_n, c_n, k_n = w.shape
    # correlate zero-padded g with the transposed, tap-reversed kernel
    gp = np.zeros((o_n, length + 2 * extra))
    gp[:, extra : extra + length] = g
    wt = np.empty((c_n, o_n, k_n))
    roffs = np.empty(k_n, dtype=np.int64)
    for k in range(k_n):
        roffs[k] = extra - offs[k]
        for o in range(o_n):
            for c in range(c_n):
                wt[c, o, k] = w[o, c, k]
    return _gather_conv(gp, wt, roffs, length + extra)


@nb.njit(cache=True, fastmath=True)
def conv_grad_weight(g, buf, offs, length, c_n):
    o_n = g.shape[0]
    k_n = offs.shape[0]
    gw = np.zeros((o_n, c_n, k_n))
    for t0 in range(0, length, TILE):
        m = min(length, t0 + TILE) - t0
        for o in range(o_n):
            gseg = g[o, t0 : t0 + m]
            for c in range(c_n):
                row = buf[c]
                for k in range(k_n):
                    seg = row[t0 + offs[k] : t0 + offs[k] + m]
                    acc = 0.0
                    for l in range(m):
                        acc += gseg[l] * seg[l]
                    gw[o, c, k] += acc
    return gw


@nb.njit(cache=True, fastmath=True)
def channel_moments(x):
    """Per-channel population mean and variance of an [N, C, S] array."""
    n_n, c_n, s_n = x.shape
    mean = np.zeros(c_n)
    var = np.zeros(c_n)
    m = n_n * s_n
    for c in range(c_n):
        acc = 0.0
        for n in range(n_n):
            row = x[n, c]
            for s in range(s_n):
                acc += row[s]
        mu = acc / m
        acc2 = 0.0
        for n in range(n_n):
            row = x[n, c]
            for s in range(s_n):
                d = row[s] - mu
                acc2 += d * d
        mean[c] = mu
        var[c] = acc2 / m
    return mean, var


@nb.njit(cache=True, fastmath=True)
def channel_grad_sums(g, xhat):
    """Per-channel sum(g) and sum(g * xhat) of [N, C, S] arrays."""
    n_n, c_n, s_n = g.shape
    sg = np.zeros(c_n)
    sgx = np.zeros(c_n)
    for n in range(n_n):
        for c in range(c_n):
            gr = g[n, c]
            xr = xhat[n, c]
            a = 0.0
            b = 0.0
            for s in range(s_n):
                a += gr[s]
                b += gr[s] * xr[s]
            sg[c] += a
            sgx[c] += b
    return sg, sgx


@nb.njit(cache=True, fastmath=True)
def channel_affine(x, scale, shift):
    """``scale[c] * x + shift[c]`` over an [N, C, S] array."""
    n_n, c_n, s_n = x.shape
    out = np.empty_like(x)
    for n in range(n_n):
        for c in range(c_n):
            a = scale[c]
            b = shift[c]
            src = x[n, c]
            dst = out[n, c]
            for s in range(s_n):
                dst[s] = a * src[s] + b
    return out


@nb.njit(cache=True, fastmath=True)
def channel_combine(g, xhat, kg, kx, k0):
    """``kg[c] * g + kx[c] * xhat + k0[c]`` over [N, C, S] arrays."""
    n_n, c_n, s_n = g.shape
    out = np.empty_like(g)
    for n in range(n_n):
        for c in range(c_n):
            a = kg[c]
            b = kx[c]
            d = k0[c]
            gr = g[n, c]
            xr = xhat[n, c]
            dst = out[n, c]
            for s in range(s_n):
                dst[s] = a * gr[s] + b * xr[s] + d
    return out
