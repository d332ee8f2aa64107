"""Compiled gather/scatter loops behind conv2d and maxpool2d.

All arrays are C-contiguous and batched: images ``B x H x W x C``, columns
``B x Ho x Wo x kh x kw x C``.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def im2col(xp, kh, kw, stride, ho, wo):
    B, hp, wp, C = xp.shape
    src = xp.reshape(B, hp, wp * C)
    run = kw * C
    cols = np.empty((B, ho, wo, kh, run), dtype=xp.dtype)
    for b in range(B):
        for oh in range(ho):
            for ow in range(wo):
                start = ow * stride * C
                for i in range(kh):
                    row = src[b, oh * stride + i]
                    dst = cols[b, oh, ow, i]
                    for t in range(run):
                        dst[t] = row[start + t]
    return cols


@numba.njit(cache=True)
def col2im(dcols, hp, wp, stride):
    B, ho, wo, kh, kw, C = dcols.shape
    run = kw * C
    src = dcols.reshape(B, ho, wo, kh, run)
    dx = np.zeros((B, hp, wp * C), dtype=dcols.dtype)
    for b in range(B):
        for oh in range(ho):
            for ow in range(wo):
                start = ow * stride * C
                for i in range(kh):
                    row = dx[b, oh * stride + i]
                    s = src[b, oh, ow, i]
                    for t in range(run):
                        row[start + t] += s[t]
    return dx.reshape(B, hp, wp, C)


@numba.njit(cache=True)
def maxpool_forward(x, k, stride, ho, wo):
    B, _, _, C = x.shape
    out = np.empty((B, ho, wo, C), dtype=x.dtype)
    arg = np.empty((B, ho, wo, C), dtype=np.int32)
    for b in range(B):
        for oh in range(ho):
            for ow in range(wo):
                for c in range(C):
                    best = x[b, oh * stride, ow * stride, c]
                    idx = 0
                    for i in range(k):
                        for j in range(k):
                            v = x[b, oh * stride + i, ow * stride + j, c]
                            if v > best:
                                best = v
                                idx = i * k + j
                    out[b, oh, ow, c] = best
                    arg[b, oh, ow, c] = idx
    return out, arg


@numba.njit(cache=True)
def maxpool_backward(g, arg, k, stride, h, w):
    B, ho, wo, C = g.shape
    dx = np.zeros((B, h, w, C), dtype=g.dtype)
    for b in range(B):
        for oh in range(ho):
            for ow in range(wo):
                for c in range(C):
                    p = arg[b, oh, ow, c]
                    dx[b, oh * stride + p // k, ow * stride + p % k, c] += g[b, oh, ow, c]
    return dx
