"""Jitted inner loops for 3-D convolution.

All kernels take pre-padded inputs and write into caller-allocated
outputs.  The innermost loop always runs over the contiguous x axis so
the compiler can vectorize it; that layout is what makes the surrogate
net competitive with the separable filter bank it replaces.

Kernels are dtype-polymorphic: float32 for production, float64 for
gradient checking.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(fastmath=True, cache=True)
def conv3d_forward(xp, w, b, out, stride):
    """out[n,o] = sum_i xp[n,i] * w[o,i] + b[o], valid placement with stride.

    ``xp`` is the zero-padded input ``(n, c_in, zp, yp, xp)``; ``w`` is
    ``(c_out, c_in, k, k, k)``; ``out`` is ``(n, c_out, zo, yo, xo)``.
    """
    n_batch, c_out = out.shape[0], out.shape[1]
    zo, yo, xo = out.shape[2], out.shape[3], out.shape[4]
    c_in, k = w.shape[1], w.shape[2]
    row = np.empty(xo, xp.dtype)
    for n in range(n_batch):
        for o in range(c_out):
            for z in range(zo):
                for y in range(yo):
                    for xx in range(xo):
                        row[xx] = b[o]
                    for i in range(c_in):
                        for dz in range(k):
                            for dy in range(k):
                                src = xp[n, i, z * stride + dz, y * stride + dy]
                                for dx in range(k):
                                    wv = w[o, i, dz, dy, dx]
                                    if stride == 1:
                                        for xx in range(xo):
                                            row[xx] += wv * src[xx + dx]
                                    else:
                                        for xx in range(xo):
                                            row[xx] += wv * src[xx * stride + dx]
                    out[n, o, z, y, :] = row


@njit(fastmath=True, cache=True)
def conv3d_backward_input(dy, w, dxp, stride):
    """Scatter-accumulate the loss gradient onto the padded input.

    ``dxp`` must be zero-initialized with the padded input's shape.
    """
    n_batch, c_out = dy.shape[0], dy.shape[1]
    zo, yo, xo = dy.shape[2], dy.shape[3], dy.shape[4]
    c_in, k = w.shape[1], w.shape[2]
    for n in range(n_batch):
        for o in range(c_out):
            for z in range(zo):
                for y in range(yo):
                    g = dy[n, o, z, y]
                    for i in range(c_in):
                        for dz in range(k):
                            for dyk in range(k):
                                dst = dxp[n, i, z * stride + dz, y * stride + dyk]
                                for dx in range(k):
                                    wv = w[o, i, dz, dyk, dx]
                                    if stride == 1:
                                        for xx in range(xo):
                                            dst[xx + dx] += wv * g[xx]
                                    else:
                                        for xx in range(xo):
                                            dst[xx * stride + dx] += wv * g[xx]


@njit(fastmath=True, cache=True)
def conv3d_backward_params(xp, dy, dw, db, stride):
    """Accumulate weight and bias gradients; ``dw``/``db`` must be zeroed."""
    n_batch, c_out = dy.shape[0], dy.shape[1]
    zo, yo, xo = dy.shape[2], dy.shape[3], dy.shape[4]
    c_in, k = dw.shape[1], dw.shape[2]
    for n in range(n_batch):
        for o in range(c_out):
            bias_acc = xp.dtype.type(0.0)
            for z in range(zo):
                for y in range(yo):
                    g = dy[n, o, z, y]
                    for xx in range(xo):
                        bias_acc += g[xx]
                    for i in range(c_in):
                        for dz in range(k):
                            for dyk in range(k):
                                src = xp[n, i, z * stride + dz, y * stride + dyk]
                                for dx in range(k):
                                    acc = xp.dtype.type(0.0)
                                    if stride == 1:
                                        for xx in range(xo):
                                            acc += src[xx + dx] * g[xx]
                                    else:
                                        for xx in range(xo):
                                            acc += src[xx * stride + dx] * g[xx]
                                    dw[o, i, dz, dyk, dx] += acc
            db[o] += bias_acc
