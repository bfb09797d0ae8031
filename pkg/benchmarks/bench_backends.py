#!/usr/bin/env python3
"""Benchmark the numba kernel against the pure-numpy fallback.

The closed-loop step recursion dominates falsification (thousands of
simulations per search) and threshold calibration, so this is the number
that matters.  Run from the repo root:

    python3 benchmarks/bench_backends.py [--repeats 50]

Select the fallback globally with GRIDSTORM_BACKEND=numpy.
"""

import argparse
import json
import os
import time

import numpy as np

from gridstorm.falsify import FalsificationProblem, falsify_sa
from gridstorm.model import load_grid_config
from gridstorm.numerics import RngStream
from gridstorm.sim import AttackVector, BreakerSchedule, FalseDataSchedule, simulate

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIGS = os.path.join(os.path.dirname(HERE), "configs")


def load(name):
    with open(os.path.join(CONFIGS, name)) as fh:
        doc = json.load(fh)
    doc["thresholds"] = [1.0] * len(doc["generators"])  # skip calibration here
    return load_grid_config(doc)


def bench_simulate(grid, horizon, repeats, backend):
    d = min(100, horizon)
    attack = AttackVector(
        BreakerSchedule(np.zeros((d, grid.n_breakers), dtype=int)),
        FalseDataSchedule(np.zeros((grid.n_generators, d, 2)), np.array([0, 1])))
    simulate(grid, attack, horizon=horizon, backend=backend)  # warm-up / JIT
    t0 = time.perf_counter()
    for _ in range(repeats):
        simulate(grid, attack, horizon=horizon, backend=backend)
    return (time.perf_counter() - t0) / repeats


def bench_falsify(grid, backend):
    laa = BreakerSchedule(np.zeros((60, grid.n_breakers), dtype=int))
    problem = FalsificationProblem(grid=grid, laa=laa, d=60,
                                   range_lo=-0.05, range_hi=0.05,
                                   mask=np.array([0, 1]), control_points=5)
    t0 = time.perf_counter()
    falsify_sa(problem, budget=1000, restarts=2, rng=RngStream(0, 0),
               backend=backend)
    return time.perf_counter() - t0


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    grids = {"toy (1 gen)": load("toy_grid.json"),
             "default (3 gen)": load("default_grid.json")}

    print(f"{'case':<34}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for name, grid in grids.items():
        for horizon in (100, 800):
            t_np = bench_simulate(grid, horizon, args.repeats, "numpy")
            t_nb = bench_simulate(grid, horizon, args.repeats, "numba")
            label = f"simulate {name} x{horizon}"
            print(f"{label:<34}{t_np * 1e3:>10.2f}ms{t_nb * 1e3:>10.2f}ms"
                  f"{t_np / t_nb:>9.1f}x")

    t_np = bench_falsify(grids["toy (1 gen)"], "numpy")
    t_nb = bench_falsify(grids["toy (1 gen)"], "numba")
    label = "falsify toy, 1000 evaluations"
    print(f"{label:<34}{t_np:>10.2f}s {t_nb:>10.2f}s {t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
