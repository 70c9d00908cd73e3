#!/usr/bin/env python3
"""Numba vs pure-numpy timings for the hot kernels.

Both paths are called directly on identical inputs, so the flag
``NMLRL_DISABLE_NUMBA`` does not matter here.  Outputs are checked for
agreement before anything is timed.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--out kernels.csv]
"""
import argparse
import csv
import time

import numpy as np

from nmlrl import harness, kernels, maze


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def rollout_case(world, n_steps=5000):
    rng = np.random.default_rng(0)
    n = world.cell_grid
    q = rng.normal(size=(n * n, len(maze.ACTIONS)))
    u = rng.random(n_steps)

    def call(fn):
        def go():
            outs = [np.zeros((n_steps, 4)), *(np.zeros(n_steps, dtype=np.int64) for _ in range(4))]
            fn(world.walls, world.start, q, maze.ACTIONS, maze.STEP_SCALE, 0.1, 100, n_steps, n,
               u, False, *outs)
            return outs
        return go

    return call(kernels._rollout_nb), call(kernels._rollout_py)


def visibility_case(world, n=300):
    rng = np.random.default_rng(1)
    p = rng.uniform(-4, 4, (n, 2))
    q = rng.uniform(-4, 4, (n, 2))
    return (lambda: kernels._blocked_nb(p, q, world.walls),
            lambda: kernels._blocked_np(p, q, world.walls))


def soft_q_case(n_states=1600, n_sweeps=20):
    backend = harness.SoftQBackend(n_states, 0.1)
    rng = np.random.default_rng(2)
    s = rng.integers(0, n_states, 40_000)
    a = rng.integers(0, 8, 40_000)
    backend.record(s, a, np.clip(s + rng.integers(-1, 2, len(s)), 0, n_states - 1))
    s, a, s2, prob = backend.model_arrays()
    r = rng.random(n_states)[s2]

    def call(fn):
        def go():
            q = np.zeros((n_states, 8))
            for _ in range(n_sweeps):
                fn(q, s, a, s2, r, prob, 0.99, 0.1)
            return q
        return go

    return call(kernels._soft_q_nb), call(kernels._soft_q_np)


def same(a, b):
    if isinstance(a, list):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--out", default=None, help="optional CSV of the timings")
    args = ap.parse_args(argv)
    if kernels.njit is None:
        raise SystemExit("numba is not installed; nothing to compare")

    world = maze.make_maze("spiral")
    cases = {"rollout 5k steps": rollout_case(world),
             "visibility 300x300": visibility_case(world),
             "soft-Q 20 sweeps": soft_q_case()}
    rows = []
    print(f"{'kernel':<20} {'numba':>10} {'numpy':>10} {'speedup':>8}")
    for name, (nb, npy) in cases.items():
        if not same(nb(), npy()):  # also warms up the jit
            raise SystemExit(f"{name}: numba and numpy paths disagree")
        t_nb, t_np = best_of(nb, args.repeat), best_of(npy, args.repeat)
        rows.append((name, t_nb, t_np))
        print(f"{name:<20} {t_nb * 1e3:>8.2f}ms {t_np * 1e3:>8.2f}ms {t_np / t_nb:>7.1f}x")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kernel", "numba_s", "numpy_s"])
            w.writerows([n, repr(a), repr(b)] for n, a, b in rows)


if __name__ == "__main__":
    main()
