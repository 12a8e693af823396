"""Backend parity between the compiled and pure depthwise-conv kernels."""

import numpy as np
import pytest

from petrecon.numeric import _kernels_np as knp
from petrecon.numeric import kernels

try:
    from petrecon.numeric import _kernels_cy as kcy
except ImportError:
    kcy = None

needs_compiled = pytest.mark.skipif(kcy is None, reason="compiled backend not built")


def _case(seed=0, c=5, h=9, w=7):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c, h, w)).astype(np.float32)
    wgt = rng.standard_normal((c, 3, 3)).astype(np.float32)
    gy = rng.standard_normal((c, h, w)).astype(np.float32)
    return x, wgt, gy


@needs_compiled
def test_forward_bit_identical():
    x, w, _ = _case()
    np.testing.assert_array_equal(knp.dwconv3x3_fwd(x, w), kcy.dwconv3x3_fwd(x, w))


@needs_compiled
def test_backward_input_bit_identical():
    _, w, gy = _case(1)
    np.testing.assert_array_equal(knp.dwconv3x3_bwd_input(gy, w),
                                  kcy.dwconv3x3_bwd_input(gy, w))


@needs_compiled
def test_backward_weight_close():
    # summation order differs between the implementations here, so parity
    # is to tolerance rather than bitwise
    x, _, gy = _case(2)
    a = knp.dwconv3x3_bwd_weight(gy, x)
    b = kcy.dwconv3x3_bwd_weight(gy, x)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-5)


@needs_compiled
def test_float64_paths_agree():
    x, w, _ = _case(3)
    x64, w64 = x.astype(np.float64), w.astype(np.float64)
    np.testing.assert_allclose(knp.dwconv3x3_fwd(x64, w64),
                               kcy.dwconv3x3_fwd(x64, w64), rtol=1e-14)


def test_active_backend_reports():
    assert kernels.active_backend() in ("numpy", "cython")


def test_forward_matches_direct_convolution():
    x, w, _ = _case(4, c=2, h=5, w=5)
    out = kernels.dwconv3x3_fwd(x, w)
    # brute force with explicit zero padding
    ref = np.zeros_like(x, dtype=np.float64)
    pad = np.pad(x.astype(np.float64), ((0, 0), (1, 1), (1, 1)))
    for c in range(2):
        for i in range(5):
            for j in range(5):
                ref[c, i, j] = np.sum(pad[c, i:i + 3, j:j + 3] * w[c].astype(np.float64))
    np.testing.assert_allclose(out, ref.astype(np.float32), rtol=1e-5, atol=1e-6)
