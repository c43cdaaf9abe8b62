"""Time the numba kernels against their pure-numpy fallbacks.

    python benchmarks/bench_backends.py [--repeat 20]

Prints one line per kernel with the best-of-repeat time for each backend
and the speedup. Numba compilation happens in a warm-up call that is not
timed. Also times one full loss+gradient evaluation under the active
backend (set METANO_DISABLE_NUMBA=1 to time the fallback end to end).
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from metano import ifno, kernels


def cases(rng):
    N, K, d = 200, 9, 32
    x = rng.standard_normal((N, K, d)) + 1j * rng.standard_normal((N, K, d))
    r_re, r_im = rng.standard_normal((2, K, d, d))
    ybar = rng.standard_normal((N, K, d)) + 1j * rng.standard_normal((N, K, d))
    n, B = 255, 200
    lower, upper = rng.uniform(-1, 0, (2, n - 1))
    diag = rng.uniform(2.5, 3.5, n)
    rhs = rng.standard_normal((n, B))
    r = 3 * rng.standard_normal(200 * 64)
    return {
        f"spectral_mix (N={N}, K={K}, d={d})": ("spectral_mix", (x, r_re, r_im)),
        f"spectral_mix_adjoint (N={N}, K={K}, d={d})": ("spectral_mix_adjoint", (ybar, x, r_re, r_im)),
        f"thomas (n={n}, rhs={B})": ("thomas", (lower, diag, upper, rhs)),
        f"cubic_solve ({r.size} nodes)": ("cubic_solve", (r,)),
    }


def best_of(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"active backend: {kernels.BACKEND}")
    if kernels.numba_impl is None:
        print("numba is not importable; only the numpy path can be timed")
    print(f"{'kernel':<46s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, (name, call_args) in cases(rng).items():
        t_np = best_of(getattr(kernels.numpy_impl, name), call_args, args.repeat)
        if kernels.numba_impl is None:
            print(f"{label:<46s} {1e3 * t_np:10.3f} {'-':>10s} {'-':>8s}")
            continue
        t_nb = best_of(getattr(kernels.numba_impl, name), call_args, args.repeat)
        print(f"{label:<46s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:7.1f}x")

    model = ifno.init_model(1, 1, 32, 1, 4, 8, seed=0)
    g = rng.standard_normal((200, 32, 1))
    u = rng.standard_normal((200, 32, 1))
    t = best_of(lambda: ifno.loss_and_grads(model, g, u), (), max(3, args.repeat // 4))
    print(f"loss+gradients, d_h=32, L=4, k_max=8, 200 x M=32 ({kernels.BACKEND}): {1e3 * t:.1f} ms")


if __name__ == "__main__":
    main()
