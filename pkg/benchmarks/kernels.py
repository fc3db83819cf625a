#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times every hot kernel (gelu, row softmax, layernorm, AdamW update, forward
and backward where applicable) on both backends across a few matrix sizes,
checks the two implementations agree to rounding, and prints a speedup table.

Usage:
    python benchmarks/kernels.py [--iterations N]
"""

import argparse
import time

import numpy as np

from trajehr.kernels import numba_backend as nb
from trajehr.kernels import numpy_backend as npk

SIZES = [(32, 32), (128, 64), (512, 128), (2048, 256)]


def timeit(fn, args, iterations):
    fn(*args)  # warm-up (numba compiles here)
    start = time.perf_counter()
    for _ in range(iterations):
        fn(*args)
    return (time.perf_counter() - start) / iterations


def check_close(a, b, label):
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    err = float(np.max(np.abs(a - b)) / (np.max(np.abs(a)) + 1e-300))
    if err > 1e-11:
        raise AssertionError(f"{label}: backends disagree (rel err {err:.2e})")


def bench_case(name, numba_fn, numpy_fn, args, iterations, compare=None):
    t_nb = timeit(numba_fn, args, iterations)
    t_np = timeit(numpy_fn, args, iterations)
    if compare is not None:
        compare(numba_fn(*args), numpy_fn(*args))
    speedup = t_np / t_nb if t_nb > 0 else float("inf")
    print(f"  {name:<18} numba {t_nb * 1e6:9.1f} us   numpy {t_np * 1e6:9.1f} us   x{speedup:5.2f}")
    return name, t_nb, t_np


def run(iterations):
    rng = np.random.default_rng(0)
    rows = []
    for n, d in SIZES:
        print(f"\nsize ({n}, {d}):")
        x = rng.normal(size=(n, d))
        gy = rng.normal(size=(n, d))
        gain = rng.normal(size=d)
        bias = rng.normal(size=d)

        rows.append(bench_case("gelu_fwd", nb.gelu_fwd, npk.gelu_fwd, (x,), iterations,
                               lambda a, b: check_close(a, b, "gelu_fwd")))
        rows.append(bench_case("gelu_bwd", nb.gelu_bwd, npk.gelu_bwd, (x, gy), iterations,
                               lambda a, b: check_close(a, b, "gelu_bwd")))

        scores = rng.normal(size=(n, d)) * 4
        scores[:, : d // 8 or 1] += np.finfo(np.float64).min  # masked block
        probs = npk.softmax_rows_fwd(scores)
        rows.append(bench_case("softmax_fwd", nb.softmax_rows_fwd, npk.softmax_rows_fwd,
                               (scores,), iterations, lambda a, b: check_close(a, b, "softmax_fwd")))
        rows.append(bench_case("softmax_bwd", nb.softmax_rows_bwd, npk.softmax_rows_bwd,
                               (probs, gy), iterations, lambda a, b: check_close(a, b, "softmax_bwd")))

        def ln_close(a, b):
            for u, v, label in zip(a, b, ("y", "mean", "rstd")):
                check_close(u, v, f"layernorm_fwd.{label}")

        rows.append(bench_case("layernorm_fwd", nb.layernorm_fwd, npk.layernorm_fwd,
                               (x, gain, bias, 1e-5), iterations, ln_close))
        _, mean, rstd = npk.layernorm_fwd(x, gain, bias, 1e-5)

        def ln_bwd_close(a, b):
            for u, v, label in zip(a, b, ("gx", "ggain", "gbias")):
                check_close(u, v, f"layernorm_bwd.{label}")

        rows.append(bench_case("layernorm_bwd", nb.layernorm_bwd, npk.layernorm_bwd,
                               (x, gain, mean, rstd, gy), iterations, ln_bwd_close))

        size = n * d
        grad = rng.normal(size=size)

        def adamw_runner(impl):
            p = np.ones(size)
            m = np.zeros(size)
            v = np.zeros(size)

            def run_once():
                impl(p, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001)

            return run_once

        nb_run = adamw_runner(nb.adamw_update)
        np_run = adamw_runner(npk.adamw_update)
        t_nb = timeit(lambda: nb_run(), (), iterations)
        t_np = timeit(lambda: np_run(), (), iterations)
        print(f"  {'adamw_update':<18} numba {t_nb * 1e6:9.1f} us   numpy {t_np * 1e6:9.1f} us   "
              f"x{t_np / t_nb:5.2f}")
        rows.append(("adamw_update", t_nb, t_np))

        # agreement over a 3-step trajectory
        p1, p2 = np.ones(size), np.ones(size)
        m1, v1 = np.zeros(size), np.zeros(size)
        m2, v2 = np.zeros(size), np.zeros(size)
        for t in range(1, 4):
            bc1, bc2 = 1 - 0.9**t, 1 - 0.999**t
            nb.adamw_update(p1, grad, m1, v1, 1e-3, 0.9, 0.999, 1e-8, 0.01, bc1, bc2)
            npk.adamw_update(p2, grad, m2, v2, 1e-3, 0.9, 0.999, 1e-8, 0.01, bc1, bc2)
        check_close(p1, p2, "adamw_update trajectory")

    total_nb = sum(t for _, t, _ in rows)
    total_np = sum(t for _, _, t in rows)
    print(f"\noverall: numba {total_nb * 1e3:.3f} ms vs numpy {total_np * 1e3:.3f} ms "
          f"per sweep (x{total_np / total_nb:.2f}); backends agree to <= 1e-11 relative")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--iterations", type=int, default=200)
    run(parser.parse_args().iterations)
