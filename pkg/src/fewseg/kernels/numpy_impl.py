"""Pure-numpy convolution kernels (fallback backend).

All kernels take CHW single-image tensors.  Strided slicing plus einsum over
the K*K kernel taps avoids materializing an im2col buffer.
"""

import numpy as np


def conv2d_forward(x, w, b, stride, pad):
    # x: (Cin,H,W), w: (Cout,Cin,K,K), b: (Cout,)
    cin, h, width = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (width + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((cout, ho, wo), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            patch = xp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride]
            out += np.einsum("oc,chw->ohw", w[:, :, ky, kx], patch, optimize=True)
    out += b[:, None, None]
    return out


def conv2d_backward_input(gy, w, x_shape, stride, pad):
    cin, h, width = x_shape
    cout, _, k, _ = w.shape
    ho, wo = gy.shape[1], gy.shape[2]
    gxp = np.zeros((cin, h + 2 * pad, width + 2 * pad), dtype=gy.dtype)
    for ky in range(k):
        for kx in range(k):
            gxp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += (
                np.einsum("oc,ohw->chw", w[:, :, ky, kx], gy, optimize=True)
            )
    return gxp[:, pad : pad + h, pad : pad + width]


def conv2d_backward_weight(gy, x, w_shape, stride, pad):
    cout, cin, k, _ = w_shape
    ho, wo = gy.shape[1], gy.shape[2]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    gw = np.zeros(w_shape, dtype=gy.dtype)
    for ky in range(k):
        for kx in range(k):
            patch = xp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride]
            gw[:, :, ky, kx] = np.einsum("ohw,chw->oc", gy, patch, optimize=True)
    gb = gy.sum(axis=(1, 2))
    return gw, gb
