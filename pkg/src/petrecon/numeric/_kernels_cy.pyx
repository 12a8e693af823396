# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled depthwise 3x3 kernels.

float32 and float64 variants via a fused type; accumulation is float64 in
the same (dy, dx) term order as the NumPy fallback so forward and
input-gradient results match it bit-for-bit on the same inputs.
"""

import numpy as np

cimport cython

ctypedef fused floating:
    float
    double


def dwconv3x3_fwd(floating[:, :, ::1] x, floating[:, :, ::1] w):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t c, i, j, dy, dx, yy, xx
    cdef double acc
    if floating is float:
        out_np = np.empty((C, H, W), dtype=np.float32)
    else:
        out_np = np.empty((C, H, W), dtype=np.float64)
    cdef floating[:, :, ::1] out = out_np
    for c in range(C):
        for i in range(H):
            for j in range(W):
                acc = 0.0
                for dy in range(3):
                    yy = i + dy - 1
                    if yy < 0 or yy >= H:
                        continue
                    for dx in range(3):
                        xx = j + dx - 1
                        if xx < 0 or xx >= W:
                            continue
                        acc += (<double> x[c, yy, xx]) * (<double> w[c, dy, dx])
                out[c, i, j] = <floating> acc
    return out_np


def dwconv3x3_bwd_input(floating[:, :, ::1] g, floating[:, :, ::1] w):
    cdef Py_ssize_t C = g.shape[0], H = g.shape[1], W = g.shape[2]
    cdef Py_ssize_t c, i, j, ey, ex, yy, xx
    cdef double acc
    if floating is float:
        out_np = np.empty((C, H, W), dtype=np.float32)
    else:
        out_np = np.empty((C, H, W), dtype=np.float64)
    cdef floating[:, :, ::1] out = out_np
    for c in range(C):
        for i in range(H):
            for j in range(W):
                acc = 0.0
                for ey in range(3):
                    yy = i + ey - 1
                    if yy < 0 or yy >= H:
                        continue
                    for ex in range(3):
                        xx = j + ex - 1
                        if xx < 0 or xx >= W:
                            continue
                        acc += (<double> g[c, yy, xx]) * (<double> w[c, 2 - ey, 2 - ex])
                out[c, i, j] = <floating> acc
    return out_np


def dwconv3x3_bwd_weight(floating[:, :, ::1] g, floating[:, :, ::1] x):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t c, i, j, dy, dx, yy, xx
    cdef double acc
    if floating is float:
        dw_np = np.empty((C, 3, 3), dtype=np.float32)
    else:
        dw_np = np.empty((C, 3, 3), dtype=np.float64)
    cdef floating[:, :, ::1] dw = dw_np
    for c in range(C):
        for dy in range(3):
            for dx in range(3):
                acc = 0.0
                for i in range(H):
                    yy = i + dy - 1
                    if yy < 0 or yy >= H:
                        continue
                    for j in range(W):
                        xx = j + dx - 1
                        if xx < 0 or xx >= W:
                            continue
                        acc += (<double> g[c, i, j]) * (<double> x[c, yy, xx])
                dw[c, dy, dx] = <floating> acc
    return dw_np
