"""NumPy implementations of the depthwise 3x3 kernels.

Accumulation runs in float64 with a fixed (dy, dx) term order so the
compiled backend can reproduce the forward and input-gradient results
bit-for-bit; the weight gradient uses NumPy's pairwise summation and is
only guaranteed to agree within float32 rounding.
"""

import numpy as np


def dwconv3x3_fwd(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    C, H, W = x.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (1, 1), (1, 1)))
    w64 = w.astype(np.float64)
    acc = np.zeros((C, H, W), np.float64)
    for dy in range(3):
        for dx in range(3):
            acc += xp[:, dy : dy + H, dx : dx + W] * w64[:, dy, dx][:, None, None]
    return acc.astype(x.dtype)


def dwconv3x3_bwd_input(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    # correlation of the padded cotangent with the flipped kernel
    C, H, W = g.shape
    gp = np.pad(g.astype(np.float64), ((0, 0), (1, 1), (1, 1)))
    w64 = w.astype(np.float64)
    acc = np.zeros((C, H, W), np.float64)
    for ey in range(3):
        for ex in range(3):
            acc += gp[:, ey : ey + H, ex : ex + W] * w64[:, 2 - ey, 2 - ex][:, None, None]
    return acc.astype(g.dtype)


def dwconv3x3_bwd_weight(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    C, H, W = x.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (1, 1), (1, 1)))
    g64 = g.astype(np.float64)
    dw = np.empty((C, 3, 3), np.float64)
    for dy in range(3):
        for dx in range(3):
            dw[:, dy, dx] = (g64 * xp[:, dy : dy + H, dx : dx + W]).sum(axis=(1, 2))
    return dw.astype(x.dtype)
