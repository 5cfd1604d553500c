#!/usr/bin/env python3
"""Time the numba kernels against their pure-numpy fallbacks.

Run:  python3 benchmarks/bench_kernels.py  [--repeats N]
The same comparison is what SCRIBBLEBOX_NUMBA=0 switches at import time.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from scribblebox import kernels


def timeit(fn, *args, repeats=5):
    fn(*args)  # warm-up (and JIT compile on the numba path)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    cases = {
        "zncc_scores (110x110 search, 60x60 tmpl)": (
            kernels.zncc_scores,
            rng.random((110, 110)),
            rng.random((60, 60)),
        ),
        "binary_erode x3 (240x320)": (
            kernels.binary_erode,
            rng.random((240, 320)) > 0.4,
            3,
        ),
        "chebyshev_dilate r=10 (240x320)": (
            kernels.chebyshev_dilate,
            rng.random((240, 320)) > 0.95,
            10,
        ),
        "label_components (240x320)": (
            kernels.label_components,
            rng.random((240, 320)) > 0.6,
        ),
        "nn_assign (576x576, d=8)": (
            kernels.nn_assign,
            rng.standard_normal((576, 8)),
            rng.standard_normal((576, 8)),
        ),
    }

    print(f"{'kernel':<44} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, (fn, *fn_args) in cases.items():
        kernels.set_backend(False)
        t_np = timeit(fn, *fn_args, repeats=args.repeats)
        kernels.set_backend(True)
        t_nb = timeit(fn, *fn_args, repeats=args.repeats)
        print(f"{name:<44} {t_np*1e3:>8.2f}ms {t_nb*1e3:>8.2f}ms {t_np/t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
