"""Compare the compiled and pure-NumPy depthwise-convolution kernels.

Usage: python3 benchmarks/bench_kernels.py [--sizes 32,64,128] [--channels 16]

Runs forward, input-gradient, and weight-gradient passes on identical
inputs through both backends, reports median wall times and the speedup,
and verifies the outputs agree.
"""

from __future__ import annotations

import argparse
import statistics
import sys
import time

import numpy as np

from petrecon.numeric import _kernels_np as knp

try:
    from petrecon.numeric import _kernels_cy as kcy
except ImportError:
    kcy = None


def _time(fn, repeats: int) -> float:
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def bench(side: int, channels: int, repeats: int) -> list[str]:
    rng = np.random.default_rng(0)
    x = rng.standard_normal((channels, side, side)).astype(np.float32)
    w = rng.standard_normal((channels, 3, 3)).astype(np.float32)
    gy = rng.standard_normal((channels, side, side)).astype(np.float32)

    cases = [
        ("forward", lambda k: k.dwconv3x3_fwd(x, w)),
        ("grad_input", lambda k: k.dwconv3x3_bwd_input(gy, w)),
        ("grad_weight", lambda k: k.dwconv3x3_bwd_weight(gy, x)),
    ]
    lines = []
    for name, call in cases:
        t_np = _time(lambda: call(knp), repeats)
        if kcy is None:
            lines.append(f"{side:4d}px {name:11s} numpy {t_np * 1e3:8.2f} ms   "
                         "(compiled backend not built)")
            continue
        t_cy = _time(lambda: call(kcy), repeats)
        a, b = call(knp), call(kcy)
        worst = float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))
        lines.append(
            f"{side:4d}px {name:11s} numpy {t_np * 1e3:8.2f} ms   "
            f"compiled {t_cy * 1e3:8.2f} ms   speedup {t_np / t_cy:5.1f}x   "
            f"max |diff| {worst:.2e}")
    return lines


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="32,64,128")
    parser.add_argument("--channels", type=int, default=16)
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",")]
    if kcy is None:
        print("note: compiled extension unavailable; timing numpy only")
    for side in sizes:
        for line in bench(side, args.channels, args.repeats):
            print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
