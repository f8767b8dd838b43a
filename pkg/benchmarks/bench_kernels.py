"""Benchmark the compiled kernel extension against the numpy fallback.

Runs the two hot kernels (recursive IIR filtering and the RNN patch scan)
through both backends on representative workloads and prints a timing table.
The fallback is loaded from a subprocess-free second import path: both
implementations are imported directly, so one process measures both.

Usage: python3 benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from icsid._core import _kernels_py

try:
    from icsid._core import _kernels as _compiled
except ImportError:
    _compiled = None


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_iir(mod, rng, repeats: int) -> float:
    # order-10 filter over a calibration-length record, the datagen hot path
    a = np.empty(11)
    a[0] = 1.0
    a[1:] = rng.uniform(-0.05, 0.05, 10)
    b = np.full(11, np.sum(a) / 11)
    u = rng.standard_normal(10_200)

    def run():
        zi = np.zeros(10)
        mod.iir_filter(b, a, u, zi)

    return _time(run, repeats)


def bench_rnn(mod, rng, repeats: int, dtype=np.float32) -> tuple:
    # patch scan at paper scale: 3200 patches of length 4, width 128
    T, B, H = 4, 3200, 128
    xw = rng.standard_normal((T, B, H)).astype(dtype)
    w_rec = (rng.standard_normal((H, H)) * 0.05).astype(dtype)
    h0 = np.zeros((B, H), dtype=dtype)
    h_out = np.empty((T, B, H), dtype=dtype)
    grad_h = rng.standard_normal((T, B, H)).astype(dtype)
    da = np.empty_like(grad_h)
    dh0 = np.empty_like(h0)

    def fwd():
        mod.rnn_scan_fwd(xw, w_rec, h0, h_out)

    t_fwd = _time(fwd, repeats)
    fwd()

    def bwd():
        dw_rec = np.zeros_like(w_rec)
        mod.rnn_scan_bwd(h_out, h0, w_rec, grad_h, da, dh0, dw_rec)

    return t_fwd, _time(bwd, repeats)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    rows = []
    py_iir = bench_iir(_kernels_py, rng, args.repeats)
    py_fwd, py_bwd = bench_rnn(_kernels_py, rng, args.repeats)
    if _compiled is not None:
        c_iir = bench_iir(_compiled, rng, args.repeats)
        c_fwd, c_bwd = bench_rnn(_compiled, rng, args.repeats)
    else:
        c_iir = c_fwd = c_bwd = None

    rows.append(("iir_filter (order 10, 10.2k samples)", c_iir, py_iir))
    rows.append(("rnn_scan_fwd (4x3200x128, f32)", c_fwd, py_fwd))
    rows.append(("rnn_scan_bwd (4x3200x128, f32)", c_bwd, py_bwd))

    print(f"{'kernel':<40} {'compiled':>12} {'python':>12} {'speedup':>9}")
    for name, tc, tp in rows:
        if tc is None:
            print(f"{name:<40} {'n/a':>12} {tp * 1e3:>10.2f}ms {'n/a':>9}")
        else:
            print(
                f"{name:<40} {tc * 1e3:>10.2f}ms {tp * 1e3:>10.2f}ms "
                f"{tp / tc:>8.1f}x"
            )


if __name__ == "__main__":
    main()
