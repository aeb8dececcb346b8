"""Compiled vs numpy kernels: per-call time of the RA solve and the projection.

    python benchmarks/bench_kernels.py [--repeat 200]
"""

import argparse
import timeit

import numpy as np

from bandshare import _pykernels

try:
    from bandshare import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def table2_cells(rng, cells=4, clients=30):
    rate = np.full((cells, clients), 0.5)
    active = rng.random((cells, clients)) < np.array([0.1, 0.9, 0.9, 0.1])[:cells, None]
    extra = rng.exponential(1.0, (cells, clients)) * (rng.random((cells, clients)) < 0.3)
    budget = np.array([8.0, 32.0, 32.0, 8.0])[:cells]
    kink = np.full((cells, clients), 0.8326)
    return rate, extra, active, budget, kink


def bench(fn, repeat):
    t = timeit.Timer(fn)
    n, _ = t.autorange()
    best = min(t.repeat(repeat=5, number=max(n, repeat // 5 or 1)))
    return best / max(n, repeat // 5 or 1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    rate, extra, active, budget, kink = table2_cells(rng)
    x = rng.normal(10, 15, (2, 2, 2))

    cases = {
        "solve_cells (4 cells x 30 clients)": (
            lambda: _pykernels.solve_cells(rate, extra, active, budget, 1.0, 0.8, 0.1, kink),
            _ckernels and (lambda: _ckernels.solve_cells(rate, extra, active.astype(np.uint8), budget,
                                                         1.0, 0.8, 0.1, kink))),
        "dykstra_project (2 regions x 2 operators)": (
            lambda: _pykernels.dykstra_project(x, 20.0, 0.001, 1e-9, 100000),
            _ckernels and (lambda: _ckernels.dykstra_project(x, 20.0, 0.001, 1e-9, 100000))),
    }
    print(f"{'kernel':45} {'numpy [us]':>12} {'cython [us]':>12} {'speed-up':>9}")
    for name, (py, cy) in cases.items():
        tp = bench(py, args.repeat) * 1e6
        if cy:
            tc = bench(cy, args.repeat) * 1e6
            print(f"{name:45} {tp:12.1f} {tc:12.1f} {tp / tc:8.1f}x")
        else:
            print(f"{name:45} {tp:12.1f} {'n/a':>12} {'':>9}")


if __name__ == "__main__":
    main()
