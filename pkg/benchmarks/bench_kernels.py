"""Compare the numba and numpy kernel paths.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints best-of-N wall time per kernel and shape, and checks the two paths
agree bit for bit.
"""

import argparse
import time

import numpy as np

from tqsim import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    if not kernels.HAVE_NUMBA:
        print("numba not installed; only the numpy path is available")
    print(f"{'kernel':<12} {'shape':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for n, d in ((4096, 64), (16384, 768), (65536, 96)):
        x = rng.standard_normal((n, d)) * 3
        s = rng.uniform(0.01, 0.1, d)
        z = rng.integers(0, 256, d).astype(np.float64)
        ref = kernels.quantize_2d(x, s, z, 255, use_numba=False)
        t_np = best_of(lambda: kernels.quantize_2d(x, s, z, 255, use_numba=False), args.repeat)
        row = f"{'quantize':<12} {f'{n}x{d}':<18} {t_np * 1e3:>10.2f}"
        if kernels.HAVE_NUMBA:
            assert np.array_equal(ref, kernels.quantize_2d(x, s, z, 255, use_numba=True))
            t_nb = best_of(lambda: kernels.quantize_2d(x, s, z, 255, use_numba=True), args.repeat)
            row += f" {t_nb * 1e3:>10.2f} {t_np / t_nb:>8.2f}"
        print(row)
    for m, k, n in ((256, 64, 64), (512, 768, 768), (128, 3072, 768)):
        a = rng.integers(0, 256, (m, k))
        b = rng.integers(-128, 128, (n, k))
        ref = kernels.int_matmul(a, b, use_numba=False)
        t_np = best_of(lambda: kernels.int_matmul(a, b, use_numba=False), args.repeat)
        row = f"{'int_matmul':<12} {f'{m}x{k}x{n}':<18} {t_np * 1e3:>10.2f}"
        if kernels.HAVE_NUMBA:
            assert np.array_equal(ref, kernels.int_matmul(a, b, use_numba=True))
            t_nb = best_of(lambda: kernels.int_matmul(a, b, use_numba=True), args.repeat)
            row += f" {t_nb * 1e3:>10.2f} {t_np / t_nb:>8.2f}"
        print(row)


if __name__ == "__main__":
    main()
