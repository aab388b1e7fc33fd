"""Time each hot kernel under the numba and pure-numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--steps 20000] [--json out.json]

Numba kernels are called once before timing so compilation is excluded.
"""
import argparse
import json
import time

import numpy as np

from fplearn.kernels import LORENZ63, TANH, VDP, get_backend


def cases(steps: int):
    rng = np.random.default_rng(0)

    pts = rng.uniform(-4, 4, (1_000_000, 2))
    bin_args = (pts, np.array([-4.0, -4.0]), np.array([0.16, 0.16]), np.array([50, 50]), np.array([50, 1]))

    n, m = 2500, 4900
    p = rng.integers(0, n, m)
    coo_args = (p, np.minimum(p + 1, n - 1), rng.standard_normal(m), 0.1, 0.05, n)

    a = rng.standard_normal((100, 100))
    logk = -((np.arange(100)[:, None] - np.arange(100)[None, :]) * 0.08) ** 2 / 0.1
    conv_args = (a, logk)

    def em(name, dim, paths, extra, lo=-np.inf, hi=np.inf):
        def make():
            x = rng.uniform(-1, 1, (paths, dim))
            noise = rng.standard_normal((steps, paths, dim))
            out = np.empty((steps // 10 + 1, paths, dim))
            return (x, noise, 0.001, 0.1, 10, 0, out, 1, np.full(dim, lo), np.full(dim, hi)) + extra
        return name, make

    w1, b1 = rng.standard_normal((100, 2)), rng.standard_normal(100)
    w2, b2 = rng.standard_normal((2, 100)) * 0.1, rng.standard_normal(2)
    return [
        ("bin_counts 1e6 pts", "bin_counts", lambda: bin_args),
        ("assemble_coo 50x50", "assemble_coo", lambda: coo_args),
        ("logconv 100x100x100", "logconv", lambda: conv_args),
        ("em_builtin vdp 1 path", *em("em_builtin", 2, 1, (VDP, np.array([1.0])))),
        ("em_builtin lorenz 200 paths", *em("em_builtin", 3, 200, (LORENZ63, np.array([10.0, 28.0, 8 / 3])))),
        ("em_mlp h=100 1 path", *em("em_mlp", 2, 1, (w1, b1, w2, b2, TANH), -4.0, 4.0)),
    ]


def best_time(fn, make, repeat):
    times = []
    for _ in range(repeat):
        args = make()
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--steps", type=int, default=20_000, help="Euler-Maruyama steps per path")
    ap.add_argument("--json", default=None, help="also write the results here")
    args = ap.parse_args(argv)
    nb, npk = get_backend("numba"), get_backend("numpy")
    rows = []
    print(f"{'kernel':32s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speed-up':>9s}")
    for label, name, make in cases(args.steps):
        getattr(nb, name)(*make())  # compile
        t_nb = best_time(getattr(nb, name), make, args.repeat)
        t_np = best_time(getattr(npk, name), make, args.repeat)
        rows.append({"kernel": label, "numba": t_nb, "numpy": t_np})
        print(f"{label:32s} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:8.1f}x", flush=True)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
