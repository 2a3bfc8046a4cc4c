"""Time the numpy and numba kernel paths, and the ``auto`` dispatch, side by side.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from smoothrl import kernels as K
from smoothrl.autodiff import Mlp


def bench(fn, repeat):
    fn()  # warm-up (and numba compilation)
    n = max(1, repeat)
    return min(timeit.repeat(fn, number=n, repeat=3)) / n


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--sizes", default="4,64,64,2")
    args = ap.parse_args()
    sizes = tuple(int(s) for s in args.sizes.split(","))
    arr = np.array(sizes, dtype=np.int64)
    rng = np.random.default_rng(0)
    net = Mlp.init(sizes, rng)
    p = net.params
    print(f"network {sizes}, {net.n_params} parameters; times in microseconds")
    print(f"{'kernel':<12}{'rows':>6}{'numpy':>12}{'numba':>12}{'auto':>12}{'np/nb':>8}")
    K.MODE = "auto"
    for rows in (1, 16, 64, 1000):
        X = rng.standard_normal((rows, sizes[0]))
        out, H = K.np_mlp_forward(p, sizes, X)
        G = rng.standard_normal(out.shape)
        V = rng.standard_normal(p.size)
        d0 = rng.uniform(-0.01, 0.01, size=X.shape)
        w = np.ones(sizes[-1])
        reps = args.repeat if rows <= 64 else max(1, args.repeat // 20)
        cases = {
            "forward": (lambda: K.np_mlp_forward(p, sizes, X),
                        lambda: K.nb_mlp_forward(p, arr, X),
                        lambda: K.mlp_forward(p, sizes, X)),
            "vjp": (lambda: K.np_mlp_vjp(p, sizes, X, H, G),
                    lambda: K.nb_mlp_vjp(p, arr, X, H, G),
                    lambda: K.mlp_vjp(p, sizes, X, H, G)),
            "jvp": (lambda: K.np_mlp_jvp(p, sizes, X, H, V),
                    lambda: K.nb_mlp_jvp(p, arr, X, H, V),
                    lambda: K.mlp_jvp(p, sizes, X, H, V)),
            "pgd10": (lambda: K.np_pgd_sqdiff(p, sizes, X, sizes[0], w, d0, 0.01, 0.002, 10, True),
                      lambda: K.nb_pgd_sqdiff(p, arr, X, sizes[0], w, d0, 0.01, 0.002, 10, True,
                                              False, w),
                      lambda: K.pgd_sqdiff(p, sizes, X, sizes[0], w, d0, 0.01, 0.002, 10)),
        }
        for name, fns in cases.items():
            t_np, t_nb, t_auto = (bench(f, reps) * 1e6 for f in fns)
            print(f"{name:<12}{rows:>6}{t_np:>12.1f}{t_nb:>12.1f}{t_auto:>12.1f}"
                  f"{t_np / t_nb:>8.2f}")


if __name__ == "__main__":
    main()
