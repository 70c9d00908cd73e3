"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one PASS/FAIL line (shown in the terminal summary) and then
asserts.  The end-to-end RL criteria share one cache of finished runs.
"""
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import record_criterion
from nmlrl import bench, net
from nmlrl.classifiers import (Convergence, LabeledDataset, cnml_naive_batch, cnml_tabular,
                               cnml_tabular_exact, kernel_weight, query_importance_weight,
                               read_dataset)
from nmlrl.harness import RunConfig, run
from nmlrl.maze import TabularCounts
from nmlrl.net import MlpArchitecture

from importlib import resources

SEEDS = range(5)


def reference_dataset():
    return read_dataset(resources.files("nmlrl").joinpath("data", "reference_32.csv"))


# ------------------------------------------------------------- 1: tabular


def refit_oracle(n_visits, n_goal):
    """Add the query with each label, refit a Bernoulli by counting, normalise."""
    like = {}
    for label in (0, 1):
        pos = n_goal + (label == 1)
        total = n_visits + n_goal + 1
        p1 = Fraction(pos, total)
        like[label] = p1 if label == 1 else 1 - p1
    return like[1] / (like[0] + like[1])


def test_criterion_01_tabular_exactness():
    t = time.perf_counter()
    bad = []
    counts = TabularCounts(1)
    for n in range(51):
        for g in range(51):
            exact = cnml_tabular_exact(n, g)
            counts.N[0], counts.G[0] = n, g
            if exact != Fraction(g + 1, n + g + 2) or exact != refit_oracle(n, g) \
                    or cnml_tabular(counts, 0) != float(exact):
                bad.append((n, g))
    dt = time.perf_counter() - t
    ok = not bad and dt < 1.0
    record_criterion(1, ok, f"2601 (N, G) pairs, {len(bad)} mismatches, {dt:.3f}s")
    assert ok


# -------------------------------------------------- 2: CNML normalisation


def test_criterion_02_cnml_normalisation_and_uniformity():
    t = time.perf_counter()
    ds = bench.two_cluster_dataset(64, seed=0)
    diam = np.linalg.norm(ds.X.max(0) - ds.X.min(0))
    near = np.random.default_rng(1).uniform(-3, 3, (6, 2))
    dirs = np.array([[1, 0], [0, 1], [-1, 0], [0, -1], [0.6, 0.8], [-0.8, 0.6]])
    far = 10 * diam * dirs
    arch = MlpArchitecture(2, (64, 64))
    preds = cnml_naive_batch(arch, ds, np.vstack([near, far]), Convergence())
    norm_err = max(abs(p.p_label0 + p.p_label1 - 1.0) for p in preds)
    far_p = [p.p_label1 for p in preds[len(near):]]
    dt = time.perf_counter() - t
    ok = norm_err <= 1e-9 and all(0.35 <= p <= 0.65 for p in far_p) and dt < 300
    record_criterion(2, ok, f"max normalisation error {norm_err:.1e}, far p(e=1) in "
                            f"[{min(far_p):.3f}, {max(far_p):.3f}], {dt:.0f}s")
    assert ok


# ---------------------------------------------------- 3: meta-NML fidelity


def test_criterion_03_meta_nml_fidelity():
    t = time.perf_counter()
    steps, gaps, _ = bench.convergence_gaps(reference_dataset(), [1, 2, 5])
    dt = time.perf_counter() - t
    ok = gaps[0] <= 0.15 and gaps[1] <= gaps[0] and gaps[2] <= gaps[1] and dt < 600
    record_criterion(3, ok, "mean |meta - naive| at 1/2/5 steps: "
                            + " / ".join(f"{g:.4f}" for g in gaps) + f", {dt:.0f}s")
    assert ok


# ---------------------------------------------- 4: importance weighting


def test_criterion_04_importance_weighting_identity():
    t = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for trial in range(20):
        n, b = int(rng.integers(1, 400)), int(rng.integers(2, 128))
        X = rng.normal(size=(n, 2))
        y = rng.integers(0, 2, n).astype(float)
        xq, yq = rng.normal(size=2), float(rng.integers(0, 2))
        model = net.init_model(MlpArchitecture(2, (16,)), trial)
        w = query_importance_weight(n, b)
        epoch = 0.0
        for s in range(0, n, b - 1):
            Xb = np.vstack([X[s:s + b - 1], xq])
            yb = np.r_[y[s:s + b - 1], yq]
            epoch += net.weighted_bce_loss(model, (Xb, yb, np.r_[np.ones(len(Xb) - 1), w]))
        plain = net.weighted_bce_loss(model, (np.vstack([X, xq]), np.r_[y, yq], np.ones(n + 1)))
        worst = max(worst, abs(epoch - plain))
    dt = time.perf_counter() - t
    ok = worst <= 1e-9 and dt < 10
    record_criterion(4, ok, f"20 (N, b) configs, max |epoch - augmented| = {worst:.1e}, {dt:.2f}s")
    assert ok


# ----------------------------------------------------------- 5: kernel


def test_criterion_05_kernel_values():
    lam = 0.5
    q = np.zeros(2)
    w0 = kernel_weight(q, q, lam)
    wl = kernel_weight(np.array([lam, 0.0]), q, lam)
    d = np.linspace(0, 5, 501)
    ws = kernel_weight(np.stack([d, np.zeros_like(d)], 1), q, lam)
    ok = w0 == 1.0 and abs(wl - 0.1003) <= 1e-3 and np.all(np.diff(ws) < 0)
    record_criterion(5, ok, f"weight(0) = {w0}, weight(lambda) = {wl:.4f}, "
                            f"strictly decreasing on [0, 5]: {bool(np.all(np.diff(ws) < 0))}")
    assert ok


# -------------------------------------------------------- 6: gradients


def test_criterion_06_gradient_correctness():
    t = time.perf_counter()
    rng = np.random.default_rng(6)
    worst = 0.0
    for i in range(10):
        d = int(rng.integers(1, 5))
        hidden = tuple(int(h) for h in rng.integers(2, 8, size=rng.integers(1, 3)))
        m = net.init_model(MlpArchitecture(d, hidden), i)
        m = m.with_params(m.params + rng.normal(0, 0.1, m.arch.n_params))
        n = int(rng.integers(1, 10))
        batch = (rng.normal(size=(n, d)), rng.integers(0, 2, n).astype(float),
                 rng.uniform(0.1, 2, n))
        g = net.gradient(m, batch)
        fd = np.zeros_like(g)
        for k in range(len(g)):
            e = np.zeros_like(g)
            e[k] = 1e-6
            fd[k] = (net.weighted_bce_loss(m.with_params(m.params + e), batch)
                     - net.weighted_bce_loss(m.with_params(m.params - e), batch)) / 2e-6
        rel = np.abs(g - fd) / np.maximum(1e-8, np.abs(g) + np.abs(fd))
        worst = max(worst, rel.max())
    dt = time.perf_counter() - t
    ok = worst < 1e-4 and dt < 30
    record_criterion(6, ok, f"10 model/batch pairs, max relative error {worst:.1e}, {dt:.1f}s")
    assert ok


# --------------------------------------------------------- RL criteria


class RunCache:
    def __init__(self):
        self.logs = {}

    def get(self, method, env, seed):
        key = (method, env, seed)
        if key not in self.logs:
            self.logs[key] = run(RunConfig(method, env=env, seed=seed, log_wall_clock=False))
        return self.logs[key]

    def summary(self, method, env):
        logs = [self.get(method, env, s) for s in SEEDS]
        return {"final": np.array([lg.column("success_rate")[-1] for lg in logs]),
                "reached": np.array([lg.column("success_rate").max() >= 0.8 for lg in logs]),
                "coverage": np.array([lg.column("coverage")[-1] for lg in logs]),
                "hidden": np.array([lg.column("hidden_reward_found")[-1] > 0 for lg in logs])}


@pytest.fixture(scope="module")
def runs():
    return RunCache()


@pytest.mark.slow
def test_criterion_07_zigzag_end_to_end(runs):
    t = time.perf_counter()
    m, v = runs.summary("mural", "zigzag"), runs.summary("vice", "zigzag")
    dt = time.perf_counter() - t
    ok = (m["reached"].sum() >= 4 and v["final"].mean() < m["final"].mean()
          and v["coverage"].mean() < m["coverage"].mean())
    record_criterion(7, ok, f"mural reached 0.8 on {m['reached'].sum()}/5 seeds; mean final "
                            f"success mural {m['final'].mean():.2f} vs vice {v['final'].mean():.2f}; "
                            f"coverage {m['coverage'].mean():.3f} vs {v['coverage'].mean():.3f}; "
                            f"{dt / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_08_shuffled_maze(runs):
    t = time.perf_counter()
    ms, vs = runs.summary("mural", "zigzag_shuffled"), runs.summary("vice", "zigzag_shuffled")
    mc = runs.summary("mural", "zigzag")
    dt = time.perf_counter() - t
    ok = ms["final"].mean() >= vs["final"].mean() and mc["final"].mean() >= ms["final"].mean()
    record_criterion(8, ok, f"mean final success: shuffled mural {ms['final'].mean():.2f} vs "
                            f"vice {vs['final'].mean():.2f}; continuous mural "
                            f"{mc['final'].mean():.2f}; {dt / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_09_runtime_ordering():
    t = time.perf_counter()
    rep = bench.run_bench(hidden_sizes=(64, 64), dataset_size=32, n_queries=100)
    dt = time.perf_counter() - t
    ratio = rep.ratio("naive_cnml", "meta_nml")
    ff, meta = rep.latency_s["feedforward"], rep.latency_s["meta_nml"]
    ok = ratio >= 50 and ff <= meta and dt < 900
    record_criterion(9, ok, f"naive / meta latency {ratio:.0f}x, feedforward {ff:.1e}s <= "
                            f"meta {meta:.1e}s, {dt / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_10_double_sided(runs):
    t = time.perf_counter()
    m, v = runs.summary("mural", "double_sided"), runs.summary("vice", "double_sided")
    dt = time.perf_counter() - t
    ok = m["hidden"].sum() >= 3 and v["hidden"].sum() <= 1
    record_criterion(10, ok, f"hidden rewards found: mural {m['hidden'].sum()}/5, "
                             f"vice {v['hidden'].sum()}/5; {dt / 60:.1f} min")
    assert ok
