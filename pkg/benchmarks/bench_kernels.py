"""Compiled vs pure-Python kernels on the three hot loops.

    python benchmarks/bench_kernels.py [--quick]

Prints one line per kernel with the best-of-N wall time of each backend and
the speed-up. Both backends get identical inputs and must agree.
"""

import argparse
import time

import numpy as np

from aptdift import kernels
from aptdift.game import Strategy
from aptdift.simulator import cumulative, derive_key, step_cap, tables
from aptdift.synth import ransomware_scale_game
from aptdift.valuenet import ValueNet


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def bench_rollouts(mod, n):
    spec = ransomware_scale_game(hidden=False)
    apt, dift = Strategy.uniform(spec, "apt"), Strategy.uniform(spec, "dift")
    tab, acum, dcum = tables(spec), cumulative(spec, apt), cumulative(spec, dift)
    key, cap = derive_key(7), step_cap(spec)
    return lambda: mod.rollout_batch(tab, acum, dcum, 0, key, 0, n, cap)


def bench_lp(mod, n):
    rng = np.random.default_rng(0)
    mats = [rng.uniform(0, 100, size=(4, 4)) for _ in range(n)]
    return lambda: [mod.matrix_game_lp(Q) for Q in mats]


def bench_sgd(mod, n):
    rng = np.random.default_rng(0)
    layout = [92, 64, 64, 22]
    X = rng.random((n, layout[0])).astype(np.float32)
    Y = rng.random((n, layout[-1])).astype(np.float32)
    order = np.arange(n, dtype=np.int64)
    p0 = ValueNet.init(layout, 1.0, seed=0, dtype=np.float32).params

    def run():
        p, v = p0.copy(), np.zeros_like(p0)
        mod.sgd_epoch(p, v, layout, X, Y, order, 32, 0.01, 0.9)
        return p
    return run


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, list):
        return all(np.allclose(x, y, atol=1e-9) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-4, atol=1e-6)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    scale = 0.1 if args.quick else 1.0
    cases = [("rollouts", bench_rollouts, int(100_000 * scale)),
             ("stage LP 4x4", bench_lp, int(2_000 * scale)),
             ("SGD epoch", bench_sgd, int(10_000 * scale))]
    try:
        fast = kernels.backend("cython")
    except ImportError:
        print("compiled kernels not built; nothing to compare")
        return
    slow = kernels.backend("python")
    print(f"{'kernel':<14}{'n':>9}{'python s':>11}{'cython s':>11}{'speed-up':>10}  agree")
    for name, make, n in cases:
        tp, outp = best_of(make(slow, n), 3)
        tc, outc = best_of(make(fast, n), 3)
        print(f"{name:<14}{n:>9}{tp:>11.4f}{tc:>11.4f}{tp / tc:>9.1f}x  {same(outp, outc)}")


if __name__ == "__main__":
    main()
