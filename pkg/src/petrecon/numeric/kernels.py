"""Kernel backend selection.

The depthwise 3x3 convolution dominates training time, so it has a compiled
implementation next to a pure-NumPy one. The compiled extension is used when
it imported cleanly; PETRECON_KERNELS=numpy|cython forces a choice (forcing
cython raises if the extension is missing). Both backends accumulate in
float64 with the same term order, so a given run is deterministic and the
two agree bit-for-bit on forward and input-gradient results.
"""

import os

import numpy as np

from .tensor import NumericError
from . import _kernels_np

_FORCED = os.environ.get("PETRECON_KERNELS", "").strip().lower()

if _FORCED == "numpy":
    _impl = _kernels_np
    _backend = "numpy"
else:
    try:
        from . import _kernels_cy as _impl  # type: ignore[attr-defined]

        _backend = "cython"
    except ImportError:
        if _FORCED == "cython":
            raise
        _impl = _kernels_np
        _backend = "numpy"


def active_backend() -> str:
    return _backend


def _check(x: np.ndarray, w: np.ndarray, wshape) -> tuple:
    if x.ndim != 3:
        raise NumericError("dwconv3x3 wants a (C,H,W) map")
    if w.shape != wshape:
        raise NumericError(f"dwconv3x3 weight shape {w.shape}, expected {wshape}")
    if x.dtype != w.dtype:
        raise NumericError("dwconv3x3 mixed dtypes")
    return np.ascontiguousarray(x), np.ascontiguousarray(w)


def dwconv3x3_fwd(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    x, w = _check(x, w, (x.shape[0], 3, 3))
    return _impl.dwconv3x3_fwd(x, w)


def dwconv3x3_bwd_input(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    g, w = _check(g, w, (g.shape[0], 3, 3))
    return _impl.dwconv3x3_bwd_input(g, w)


def dwconv3x3_bwd_weight(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    g, x = _check(g, x, (g.shape[0], x.shape[1], x.shape[2]))
    if x.shape != g.shape:
        raise NumericError("dwconv3x3 gradient/input shape mismatch")
    return _impl.dwconv3x3_bwd_weight(g, x)
