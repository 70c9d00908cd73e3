"""Query-latency benchmark and meta-NML vs naive CNML convergence study."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import net
from .classifiers import (Convergence, LabeledDataset, MetaNmlConfig, cnml_meta_query,
                          cnml_naive, cnml_naive_batch, meta_nml_probs, meta_train)
from .net import MlpArchitecture

CLASSIFIERS = ("feedforward", "meta_nml", "naive_cnml")
# meta-NML settings for the fidelity study on small reference sets
FIDELITY_META = MetaNmlConfig(inner_lr=0.01, batch_size=64, tasks_per_epoch=128,
                              lambda_dist=0.5, meta_lr=1e-3)
FIDELITY_EPOCHS = 100
GRID_LIMIT = 3.6


def two_cluster_dataset(n: int, seed: int = 0, dim: int = 2) -> LabeledDataset:
    """n points, half around +2.5 (label 1) and half around -1.5 (label 0)."""
    rng = np.random.default_rng(seed)
    n1 = n // 2
    pos = rng.normal(2.5, 0.5, size=(n1, dim))
    neg = rng.normal(-1.5, 1.0, size=(n - n1, dim))
    return LabeledDataset(np.vstack([pos, neg]), np.r_[np.ones(n1), np.zeros(n - n1)])


def query_grid(side: int = 10, limit: float = GRID_LIMIT) -> np.ndarray:
    g = np.linspace(-limit, limit, side)
    xx, yy = np.meshgrid(g, g)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass
class BenchReport:
    hidden_sizes: tuple
    dataset_size: int
    queries_per_epoch: int
    latency_s: dict = field(default_factory=dict)
    n_queries: dict = field(default_factory=dict)

    def per_epoch_s(self, name) -> float:
        """Time to label one RL epoch's worth of states with this classifier."""
        return self.latency_s[name] * self.queries_per_epoch

    def ratio(self, slow, fast) -> float:
        return self.latency_s[slow] / self.latency_s[fast]

    def rows(self):
        for name in CLASSIFIERS:
            if name in self.latency_s:
                yield [name, repr(self.latency_s[name]), self.n_queries[name],
                       repr(self.per_epoch_s(name))]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["classifier", "latency_s", "n_queries", "per_epoch_s"])
            w.writerows(self.rows())

    def table(self) -> str:
        lines = [f"arch {self.hidden_sizes}, dataset {self.dataset_size}, "
                 f"{self.queries_per_epoch} queries per epoch",
                 f"{'classifier':<12} {'latency':>12} {'queries':>8} {'per epoch':>12}"]
        for name, lat, n, ep in self.rows():
            lines.append(f"{name:<12} {float(lat):>11.3e}s {n:>8} {float(ep):>11.3e}s")
        if "naive_cnml" in self.latency_s and "meta_nml" in self.latency_s:
            lines.append(f"naive / meta speedup: {self.ratio('naive_cnml', 'meta_nml'):.0f}x")
        return "\n".join(lines)


def _time_each(fn, queries) -> float:
    total = 0.0
    for q in queries:
        t = time.perf_counter()
        fn(q)
        total += time.perf_counter() - t
    return total / len(queries)


def run_bench(hidden_sizes=(64, 64), dataset_size: int = 32, n_queries: int = 100,
              n_naive: int | None = None, queries_per_epoch: int = 1000, seed: int = 0,
              convergence: Convergence = Convergence(),
              meta_config: MetaNmlConfig = FIDELITY_META) -> BenchReport:
    """Per-query latency of the three classifiers on the same synthetic data.

    Every query is timed on its own (no batching across queries).  The naive
    path may use fewer queries (``n_naive``) since each one is two full fits.
    """
    if dataset_size < 2 or n_queries < 1:
        raise ValueError("need dataset_size >= 2 and n_queries >= 1")
    arch = MlpArchitecture(2, tuple(hidden_sizes))
    ds = two_cluster_dataset(dataset_size, seed)
    rng = np.random.default_rng(seed + 1)
    queries = rng.uniform(-4, 4, size=(n_queries, 2))
    model = net.init_model(arch, seed)
    meta = meta_train(model, ds, meta_config, 5, seed=seed)
    # warm up caches and lazy allocations before timing
    net.forward(meta, queries[0])
    cnml_meta_query(meta, ds, queries[0], meta_config)

    rep = BenchReport(tuple(hidden_sizes), dataset_size, queries_per_epoch)
    rep.latency_s["feedforward"] = _time_each(lambda q: net.forward(meta, q), queries)
    rep.latency_s["meta_nml"] = _time_each(lambda q: cnml_meta_query(meta, ds, q, meta_config),
                                           queries)
    n_naive = n_queries if n_naive is None else max(1, min(n_naive, n_queries))
    rep.latency_s["naive_cnml"] = _time_each(lambda q: cnml_naive(arch, ds, q, convergence),
                                             queries[:n_naive])
    rep.n_queries = {"feedforward": n_queries, "meta_nml": n_queries, "naive_cnml": n_naive}
    return rep


def convergence_gaps(dataset: LabeledDataset, steps_list, hidden_sizes=(64, 64),
                     config: MetaNmlConfig = FIDELITY_META, meta_epochs: int = FIDELITY_EPOCHS,
                     grid_side: int = 10, seed: int = 0,
                     convergence: Convergence = Convergence(), naive_probs=None):
    """Mean |p_meta - p_naive| over a square query grid, per adaptation step count.

    Returns (steps, gaps, naive p1 on the grid).  Pass ``naive_probs`` to reuse
    an earlier naive sweep over the same grid.
    """
    if not dataset.has_both_labels():
        raise ValueError("the convergence study needs both labels in the dataset")
    arch = MlpArchitecture(dataset.feature_dim, tuple(hidden_sizes))
    grid = query_grid(grid_side)
    if dataset.feature_dim != 2:
        raise ValueError("the query grid is two-dimensional")
    if naive_probs is None:
        naive_probs = np.array([p.p_label1 for p in
                                cnml_naive_batch(arch, dataset, grid, convergence)])
    meta = meta_train(net.init_model(arch, seed), dataset, config, meta_epochs, seed=seed)
    steps = [int(k) for k in steps_list]
    gaps = []
    for k in steps:
        p = meta_nml_probs(meta, dataset, grid, config, k_query=k)[2]
        gaps.append(float(np.mean(np.abs(p - naive_probs))))
    return steps, gaps, naive_probs


def write_gaps(path, steps, gaps) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["steps", "mean_abs_gap"])
        for k, g in zip(steps, gaps):
            w.writerow([k, repr(g)])
