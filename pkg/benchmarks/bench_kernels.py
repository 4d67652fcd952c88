"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--paths 20000] [--steps 960] [--repeat 3]

Each kernel is called once before timing so numba compilation is excluded.
"""

import argparse
import time

import numpy as np

from nsdecal import kernels as kn
from nsdecal._accel import HAVE_NUMBA


def _best(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=20_000)
    ap.add_argument("--steps", type=int, default=960)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba not importable: nothing to compare")
        return
    rng = np.random.default_rng(0)
    m, n = args.paths, args.steps
    dt = np.full(n, 1.0 / n)
    dw1 = rng.standard_normal((m, n)) * np.sqrt(dt)
    dw2 = 0.5 * dw1 + np.sqrt(0.75) * rng.standard_normal((m, n)) * np.sqrt(dt)
    s = np.exp(np.cumsum(dw1[:, :97], axis=1))
    var = np.full((m, n), 0.04)
    draws = rng.standard_normal((2000, 200))
    qs = np.array([0.1, 0.5, 0.9])

    cases = {
        "heston_euler": (lambda: kn.heston_euler_np(0.0, 0.04, 0.02, 0.8, 0.1, 0.7, dt, dw1, dw2, 10),
                         lambda: kn.heston_euler_nb(0.0, 0.04, 0.02, 0.8, 0.1, 0.7, dt, dw1, dw2, 10)),
        "log_euler": (lambda: kn.log_euler_np(0.0, var, dw1, dt, 0.02),
                      lambda: kn.log_euler_nb(0.0, var, dw1, dt, 0.02)),
        "running_max": (lambda: kn.running_max_np(s), lambda: kn.running_max_nb(s)),
        "lookback_put": (lambda: kn.lookback_put_np(s, 96), lambda: kn.lookback_put_nb(s, 96)),
        "column_quantiles": (lambda: kn.column_quantiles_np(draws, qs),
                             lambda: kn.column_quantiles_nb(draws, qs)),
    }
    print(f"{'kernel':<18}{'numpy [s]':>12}{'numba [s]':>12}{'speed-up':>10}")
    for name, (f_np, f_nb) in cases.items():
        a, b = _best(f_np, args.repeat), _best(f_nb, args.repeat)
        print(f"{name:<18}{a:>12.4f}{b:>12.4f}{a / b:>10.1f}")


if __name__ == "__main__":
    main()
