"""Numba @njit convolution kernels (default backend).

Serial loops, no prange: output order is fixed so results are bit-reproducible
across runs, and the per-image tensors here are small enough that thread
startup would dominate anyway.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _conv2d_forward(xp, w, b, stride, ho, wo):
    cout, cin, k, _ = w.shape
    out = np.empty((cout, ho, wo), dtype=xp.dtype)
    for co in range(cout):
        for oy in range(ho):
            for ox in range(wo):
                acc = b[co]
                iy0 = oy * stride
                ix0 = ox * stride
                for ci in range(cin):
                    for ky in range(k):
                        for kx in range(k):
                            acc += w[co, ci, ky, kx] * xp[ci, iy0 + ky, ix0 + kx]
                out[co, oy, ox] = acc
    return out


@njit(cache=True)
def _conv2d_backward_input(gy, w, gxp, stride):
    cout, cin, k, _ = w.shape
    ho, wo = gy.shape[1], gy.shape[2]
    for co in range(cout):
        for oy in range(ho):
            for ox in range(wo):
                g = gy[co, oy, ox]
                iy0 = oy * stride
                ix0 = ox * stride
                for ci in range(cin):
                    for ky in range(k):
                        for kx in range(k):
                            gxp[ci, iy0 + ky, ix0 + kx] += w[co, ci, ky, kx] * g
    return gxp


@njit(cache=True)
def _conv2d_backward_weight(gy, xp, gw, gb, stride):
    cout, cin, k, _ = gw.shape
    ho, wo = gy.shape[1], gy.shape[2]
    for co in range(cout):
        for oy in range(ho):
            for ox in range(wo):
                g = gy[co, oy, ox]
                gb[co] += g
                iy0 = oy * stride
                ix0 = ox * stride
                for ci in range(cin):
                    for ky in range(k):
                        for kx in range(k):
                            gw[co, ci, ky, kx] += xp[ci, iy0 + ky, ix0 + kx] * g
    return gw, gb


def conv2d_forward(x, w, b, stride, pad):
    cin, h, width = x.shape
    k = w.shape[2]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (width + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    return _conv2d_forward(np.ascontiguousarray(xp), w, b, stride, ho, wo)


def conv2d_backward_input(gy, w, x_shape, stride, pad):
    cin, h, width = x_shape
    gxp = np.zeros((cin, h + 2 * pad, width + 2 * pad), dtype=gy.dtype)
    _conv2d_backward_input(np.ascontiguousarray(gy), w, gxp, stride)
    return gxp[:, pad : pad + h, pad : pad + width]


def conv2d_backward_weight(gy, x, w_shape, stride, pad):
    pad_ = ((0, 0), (pad, pad), (pad, pad))
    xp = np.ascontiguousarray(np.pad(x, pad_))
    gw = np.zeros(w_shape, dtype=gy.dtype)
    gb = np.zeros(w_shape[0], dtype=gy.dtype)
    _conv2d_backward_weight(np.ascontiguousarray(gy), xp, gw, gb, stride)
    return gw, gb
