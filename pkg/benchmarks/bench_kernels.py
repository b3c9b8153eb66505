"""Convolution kernel timing: compiled extension vs numpy fallback.

Times the forward and weight-gradient kernels on the layer shapes the
default network actually runs (128 px input, plus the full-frame 478 px
first layer) and prints mean milliseconds per call with the speedup.

    python3 benchmarks/bench_kernels.py [--reps N]
"""

import argparse
import time

import numpy as np

from dropsort.kernels import pyconv

try:
    from dropsort.kernels import _convblas
except ImportError:
    _convblas = None

# (label, input c/h/w, filters) for each conv layer the CNN executes
LAYERS = [
    ("conv1 128px", (1, 128, 128), 8),
    ("conv2 128px", (8, 57, 57), 16),
    ("conv3 128px", (16, 21, 21), 32),
    ("conv1 478px", (1, 478, 478), 8),
]
KERNEL_PX = 15


def _time_call(fn, *args, reps):
    fn(*args)  # warm-up pays one-off allocation and cache costs
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) * 1000.0 / reps


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--reps", type=int, default=5)
    args = parser.parse_args()

    if _convblas is None:
        print("compiled extension not built; timing numpy fallback only")

    rng = np.random.default_rng(0)
    header = f"{'layer':<14} {'op':<8} {'numpy ms':>10} {'compiled ms':>12} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label, (c, h, w), n_filters in LAYERS:
        x = rng.standard_normal((c, h, w))
        weights = rng.standard_normal((n_filters, c, KERNEL_PX, KERNEL_PX))
        dy = rng.standard_normal((n_filters, h - KERNEL_PX + 1,
                                  w - KERNEL_PX + 1))
        for op, py_fn, py_args in (
                ("forward", pyconv.conv2d, (x, weights)),
                ("dweight", pyconv.conv2d_dw, (x, dy))):
            t_py = _time_call(py_fn, *py_args, reps=args.reps)
            if _convblas is None:
                print(f"{label:<14} {op:<8} {t_py:>10.2f} {'-':>12} {'-':>8}")
                continue
            c_fn = getattr(_convblas, py_fn.__name__)
            t_c = _time_call(c_fn, *py_args, reps=args.reps)
            print(f"{label:<14} {op:<8} {t_py:>10.2f} {t_c:>12.2f} "
                  f"{t_py / t_c:>7.1f}x")


if __name__ == "__main__":
    main()
