"""Time every kernel on its numba and numpy paths and check they agree.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]
"""

import argparse
import time

import numpy as np

from minsep_accounting import _accel, kernels, strategy


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(quick):
    rng = np.random.default_rng(0)
    rows = 256 if quick else 4096
    n = 200
    for b in (2, 8, 32):
        c = strategy.bsr_coefficients(b)
        Y = rng.standard_normal((rows, n))
        yield f"sliding_dots b={b}", lambda u, c=c, Y=Y: kernels.sliding_dots_naive(c, Y, use_numba=u)
    for rr in (8, rows):
        T = rng.standard_normal((rr, n))
        yield f"log_recursion rows={rr}", lambda u, T=T: kernels.log_recursion(T, -0.05, 8, use_numba=u)
    draws = (rng.random((rows, 1000)) < 0.05).astype(np.int64)
    yield "minsep_filter", lambda u: kernels.minsep_filter(draws, 10, use_numba=u)
    m = 300
    coins = rng.random((400, m)) < 0.05
    users = rng.integers(0, 100, m)
    nb = [np.flatnonzero(users == users[e]) for e in range(m)]
    indptr = np.concatenate([[0], np.cumsum([len(x) for x in nb])])
    indices = np.concatenate(nb)
    yield "multiattr_batches", lambda u: kernels.multiattr_batches(coins, indptr, indices, 4, True,
                                                                   use_numba=u)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="small inputs (smoke run)")
    args = ap.parse_args(argv)
    if not _accel.NUMBA_AVAILABLE:
        print("numba not importable; only the numpy path can run")
    print(f"{'kernel':28s} {'numba [ms]':>11s} {'numpy [ms]':>11s} {'speedup':>8s}  agree")
    for name, fn in cases(args.quick):
        a, b = fn(True), fn(False)
        agree = np.allclose(a, b, rtol=1e-12, atol=1e-12, equal_nan=True)
        t_nb = best_of(lambda: fn(True), args.repeat)
        t_np = best_of(lambda: fn(False), args.repeat)
        print(f"{name:28s} {t_nb * 1e3:11.3f} {t_np * 1e3:11.3f} {t_np / t_nb:8.2f}  {agree}")


if __name__ == "__main__":
    main()
