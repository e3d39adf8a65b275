"""Numba vs numpy timing for every dual-path kernel.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one row per kernel with the best-of-N wall time of each path, the
speedup, the max abs difference between the two outputs, and which path the
``auto`` mode selects. Compile time is excluded (one warm-up call each).
"""
import argparse
import time

import numpy as np

from volvlm import kernels as K


def best_of(fn, repeat):
    fn()  # warm-up / JIT
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    vol = rng.normal(size=(96, 96, 48)).astype(np.float32)
    x = rng.normal(size=(4096, 64)).astype(np.float32)
    y = K.softmax_fwd_np(rng.normal(size=(4096, 64)).astype(np.float32))
    dy = rng.normal(size=x.shape).astype(np.float32)
    xhat, rstd = K.layer_norm_fwd_np(x, 1e-5)
    return {
        "resample_trilinear": (lambda f: f(vol, (64, 64, 32), (1.5, 1.5, 1.5), 0.0),),
        "layer_norm_fwd": (lambda f: f(x, 1e-5)[0],),
        "layer_norm_bwd": (lambda f: f(dy, xhat, rstd),),
        "softmax_fwd": (lambda f: f(x),),
        "softmax_bwd": (lambda f: f(dy, y),),
        "gelu_fwd": (lambda f: f(x),),
        "gelu_bwd": (lambda f: f(dy, x),),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    active = K.active_paths()
    print(f"numba available: {K.HAS_NUMBA}, VOLVLM_NUMBA={K.MODE}")
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max|diff|':>10}  auto")
    for name, (call,) in cases(rng).items():
        f_np, f_nb = getattr(K, name + "_np"), getattr(K, name + "_nb")
        t_np = best_of(lambda: call(f_np), args.repeat)
        t_nb = best_of(lambda: call(f_nb), args.repeat)
        diff = float(np.max(np.abs(np.asarray(call(f_np), np.float64) - np.asarray(call(f_nb), np.float64))))
        print(f"{name:<20} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>7.2f}x {diff:>10.2e}  {active[name]}")


if __name__ == "__main__":
    main()
