"""Time the compiled core against the numpy fallback.

    python3 benchmarks/bench_core.py [--repeat 5]

Each hot kernel runs on both backends with identical inputs; the script
prints best-of-N wall times, the speedup and the largest difference
between the two outputs.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from rsbridge import _core


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def sinkhorn_case(n: int = 400):
    x = np.linspace(-5, 5, n)
    K = np.exp(-((x[:, None] - x[None, :]) ** 2) / 2)
    w = np.full(n, x[1] - x[0])
    rho0 = np.exp(-((x + 1) ** 2)) * w
    rhoT = np.exp(-((x - 1) ** 2)) * w
    A = K * (rhoT / rhoT.sum())[None, :]
    B = K * (rho0 / rho0.sum())[:, None]
    args = (A, B, w, np.ones(n), 1e-12, 2000)
    return lambda backend: _core.sinkhorn_loop(*args, backend=backend)[0]


def interp_case(n: int = 200, points: int = 200_000):
    rng = np.random.default_rng(0)
    table = rng.random((8, n))
    rows = rng.integers(0, 8, points)
    x = rng.uniform(-5, 5, points)
    h = 10 / n
    return lambda backend: _core.interp_rows(table, rows, x, -5 + h / 2, h, (n,), 1, True, backend=backend)


def bin_case(n: int = 200, points: int = 1_000_000):
    rng = np.random.default_rng(1)
    x = rng.normal(size=points) * 2
    regime = rng.integers(0, 2, points)
    return lambda backend: _core.bin_points(x, regime, -5.0, 10 / n, (n,), 2, backend=backend)[0]


CASES = {
    "sinkhorn_loop (400 nodes)": sinkhorn_case,
    "interp_rows (2e5 points)": interp_case,
    "bin_points (1e6 points)": bin_case,
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = _core.available_backends()
    print(f"active backend: {_core.BACKEND}; available: {', '.join(backends)}")
    if "cython" not in backends:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'kernel':<28}{'python s':>12}{'cython s':>12}{'speedup':>10}{'max diff':>12}")
    for name, make in CASES.items():
        run = make()
        t_py = best_of(lambda: run("python"), args.repeat)
        if "cython" in backends:
            t_cy = best_of(lambda: run("cython"), args.repeat)
            diff = float(np.max(np.abs(np.asarray(run("python"), float) - np.asarray(run("cython"), float))))
            print(f"{name:<28}{t_py:>12.4f}{t_cy:>12.4f}{t_py / t_cy:>10.1f}{diff:>12.2e}")
        else:
            print(f"{name:<28}{t_py:>12.4f}{'-':>12}{'-':>10}{'-':>12}")


if __name__ == "__main__":
    main()
