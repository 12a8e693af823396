"""Grayscale PNG export with linear windowing and maximum-intensity
projection for slice stacks."""

from __future__ import annotations

import os
import tempfile

import numpy as np
from PIL import Image

from .phantom import ImageGrid


class VizError(ValueError):
    pass


def mip(stack: np.ndarray) -> np.ndarray:
    """Per-pixel maximum along the stack axis (axis 0)."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3:
        raise VizError("expected a stack of 2-d slices")
    return stack.max(axis=0)


def symmetric_window(arr) -> tuple[float, float]:
    """(-m, m) with m the largest magnitude; the residual-panel convention."""
    a = np.asarray(arr, dtype=np.float64)
    m = float(np.max(np.abs(a)))
    if m == 0.0:
        m = 1.0
    return (-m, m)


def export_png(image, path: str, window: tuple[float, float] | None = None,
               use_mip: bool = False):
    """Write an 8-bit grayscale PNG under a linear window.

    image: ImageGrid, 2-d array, or 3-d stack (requires use_mip).  window
    defaults to the data range; it must have max > min.
    """
    arr = image.values if isinstance(image, ImageGrid) else np.asarray(image)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3:
        if not use_mip:
            raise VizError("stacks require use_mip=True")
        arr = mip(arr)
    if arr.ndim != 2:
        raise VizError("expected a 2-d image")
    if window is None:
        window = (float(arr.min()), float(arr.max()))
    lo, hi = float(window[0]), float(window[1])
    if not hi > lo:
        raise VizError(f"degenerate window ({lo}, {hi})")
    scaled = np.clip((arr - lo) / (hi - lo), 0.0, 1.0)
    u8 = np.round(scaled * 255.0).astype(np.uint8)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".png")
    try:
        with os.fdopen(fd, "wb") as f:
            Image.fromarray(u8, mode="L").save(f, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
