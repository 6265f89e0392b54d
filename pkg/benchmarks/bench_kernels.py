"""Compare the compiled convolution kernels against the numpy fallback.

Runs forward and backward passes at the layer shapes the networks
actually use and reports best-of-N wall time per backend plus the
maximum elementwise difference between their results. Run from the
repository root:

    python3 benchmarks/bench_kernels.py [--reps N]

The compiled backend is skipped (with a note) when the extension is
not importable, e.g. under SKETCHGEN_PURE=1 or before building.
"""

import argparse
import time

import numpy as np

from sketchgen import ops

try:
    from sketchgen import _kernels
except ImportError:
    _kernels = None


# (label, in_ch, out_ch, k, height, width): the generation trunk at the
# inference frame, a mid-stack layer, a pointwise layer, the parsing
# network's widest 3x3, and a training-scale patch
CASES = [
    ("trunk 5x5 on frame", 2, 32, 5, 250, 200),
    ("mid 5x5 on frame", 32, 32, 5, 246, 196),
    ("pointwise 1x1", 32, 32, 1, 242, 192),
    ("parse 3x3 half-res", 32, 64, 3, 100, 78),
    ("patch 5x5", 2, 32, 5, 32, 32),
]


def best_of(fn, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times) * 1e3


def bench_case(label, in_ch, out_ch, k, h, w, reps):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((in_ch, h, w))
    kernel = rng.standard_normal((out_ch, in_ch, k, k)) * 0.01
    bias = rng.standard_normal(out_ch) * 0.01
    grad_out = rng.standard_normal((out_ch, h - k + 1, w - k + 1))

    rows = []
    pure_fwd = ops._conv2d_forward_pure(x, kernel, bias)
    t_pure_f = best_of(lambda: ops._conv2d_forward_pure(x, kernel, bias), reps)
    t_pure_b = best_of(
        lambda: ops._conv2d_backward_pure(x, kernel, grad_out), reps)

    if _kernels is None:
        rows.append((label, "forward", t_pure_f, None, None))
        rows.append((label, "backward", t_pure_b, None, None))
        return rows

    comp_fwd = _kernels.conv2d_forward(x, kernel, bias)
    diff_f = float(np.max(np.abs(comp_fwd - pure_fwd)))
    t_comp_f = best_of(lambda: _kernels.conv2d_forward(x, kernel, bias), reps)

    pure_b = ops._conv2d_backward_pure(x, kernel, grad_out)
    comp_b = _kernels.conv2d_backward(x, kernel, grad_out)
    diff_b = max(float(np.max(np.abs(c - p))) for c, p in zip(comp_b, pure_b))
    t_comp_b = best_of(lambda: _kernels.conv2d_backward(x, kernel, grad_out), reps)

    rows.append((label, "forward", t_pure_f, t_comp_f, diff_f))
    rows.append((label, "backward", t_pure_b, t_comp_b, diff_b))
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--reps", type=int, default=5,
                        help="repetitions per measurement (best is kept)")
    args = parser.parse_args(argv)
    if args.reps < 1:
        parser.error("--reps must be positive")

    print(f"active backend at import: {ops.BACKEND}")
    if _kernels is None:
        print("compiled extension not importable; timing the fallback only")
    print(f"{'case':<22} {'pass':<9} {'pure_ms':>9} {'compiled_ms':>12} "
          f"{'speedup':>8} {'max_diff':>10}")
    for case in CASES:
        for label, direction, t_pure, t_comp, diff in bench_case(*case, args.reps):
            if t_comp is None:
                print(f"{label:<22} {direction:<9} {t_pure:>9.2f} "
                      f"{'-':>12} {'-':>8} {'-':>10}")
            else:
                print(f"{label:<22} {direction:<9} {t_pure:>9.2f} "
                      f"{t_comp:>12.2f} {t_pure / t_comp:>7.1f}x {diff:>10.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
