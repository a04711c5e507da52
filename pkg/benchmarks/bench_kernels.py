"""Compare the numba and pure-numpy hot kernels.

Run: python3 benchmarks/bench_kernels.py [--repeats 5]
Both backends are imported directly, so the DCGP_NUMBA flag does not matter here.
"""
import argparse
import time

import numpy as np

from dcgp import _kernels_numba as nb_k
from dcgp import _kernels_numpy as np_k


def best_of(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    A = rng.standard_normal((384, 250))
    B = rng.standard_normal((32 * 64, 250))
    K, d = np_k.rbf_cross(A, B, 3.0, 1.0)
    G = rng.standard_normal(K.shape)
    F = rng.standard_normal((32, 64, 250))
    w = rng.standard_normal(64)
    g = rng.standard_normal(32)
    x = rng.standard_normal((32, 28, 28, 1))
    pat = np_k.gather_patches(x, 5, 5, 2)
    gp = rng.standard_normal(pat.shape)
    return [
        ("rbf_cross 384x2048 D=250", "rbf_cross", (A, B, 3.0, 1.0)),
        ("rbf_cross_grad", "rbf_cross_grad", (G, K, d, A, B, 3.0)),
        ("weighted_self_kernel N=32 P=64", "weighted_self_kernel", (F, w, 3.0, 1.0)),
        ("weighted_self_kernel_grad", "weighted_self_kernel_grad", (g, F, w, 3.0, 1.0)),
        ("gather_patches 32x28x28 5x5/2", "gather_patches", (x, 5, 5, 2)),
        ("scatter_patches", "scatter_patches", (gp, x.shape, 5, 5, 2)),
    ]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, name, fargs in cases(rng):
        getattr(nb_k, name)(*fargs)  # compile
        t_np = best_of(getattr(np_k, name), fargs, args.repeats)
        t_nb = best_of(getattr(nb_k, name), fargs, args.repeats)
        print(f"{label:34s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
