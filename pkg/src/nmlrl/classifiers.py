"""Success classifiers: maximum likelihood, exact CNML, meta-NML and tabular CNML."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import net
from .net import MlpArchitecture, MlpModel, OptimizerState


# ------------------------------------------------------------------ datasets


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(len(X), -1) if len(X) else X.reshape(0, 1)
        y = np.array(self.y, dtype=np.float64).reshape(-1)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} feature rows but {len(y)} labels")
        if np.any((y != 0) & (y != 1)):
            raise ValueError("labels must be 0 or 1")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_points(cls, points):
        points = list(points)
        if not points:
            raise ValueError("from_points needs at least one point; construct empty datasets directly")
        return cls(np.array([p[0] for p in points]), np.array([p[1] for p in points]))

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    def __len__(self):
        return len(self.y)

    def has_both_labels(self) -> bool:
        return bool(np.any(self.y == 1) and np.any(self.y == 0))

    def fingerprint(self) -> bytes:
        return self.X.tobytes() + self.y.tobytes()


def balanced_dataset(positives, negatives, n_per_class, rng) -> LabeledDataset:
    """n_per_class draws from each pool; a pool smaller than n is drawn with replacement."""
    positives = np.asarray(positives, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    ip = rng.choice(len(positives), n_per_class, replace=len(positives) < n_per_class)
    ineg = rng.choice(len(negatives), n_per_class, replace=len(negatives) < n_per_class)
    X = np.concatenate([positives[ip], negatives[ineg]])
    y = np.concatenate([np.ones(n_per_class), np.zeros(n_per_class)])
    return LabeledDataset(X, y)


def write_dataset(ds: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(ds.feature_dim)] + ["label"])
        for x, y in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def read_dataset(path) -> LabeledDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty dataset file")
    header = rows[0]
    d = len(header) - 1
    if header != [f"x{i}" for i in range(d)] + ["label"]:
        raise ValueError(f"{path}: header must be x0,...,x{{d-1}},label; got {header}")
    body = [r for r in rows[1:] if r]
    X = np.array([[float(v) for v in r[:d]] for r in body]).reshape(-1, d)
    y = np.array([int(r[d]) for r in body])
    return LabeledDataset(X, y)


# ------------------------------------------------------------- predictions


@dataclass(frozen=True)
class CnmlPrediction:
    p_label0: float
    p_label1: float
    raw_likelihood0: float
    raw_likelihood1: float
    steps_used: int = 0
    converged: bool = True

    @classmethod
    def from_raw(cls, raw0, raw1, steps_used=0, converged=True):
        raw0 = float(raw0)
        raw1 = float(raw1)
        p1 = raw1 / (raw0 + raw1)
        return cls(1.0 - p1, p1, raw0, raw1, int(steps_used), bool(converged))


def write_predictions(points, preds, path) -> None:
    """CSV x0..x{d-1},p1_raw0,p1_raw1,p1 (raw likelihoods under each adapted model)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = points.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(d)] + ["p1_raw0", "p1_raw1", "p1"])
        for x, p in zip(points, preds):
            w.writerow([repr(float(v)) for v in x]
                       + [repr(p.raw_likelihood0), repr(p.raw_likelihood1), repr(p.p_label1)])


# ----------------------------------------------------------------- MLE (VICE)


def mle_train(model: MlpModel, dataset: LabeledDataset, epochs: int, weight_decay: float = 0.0,
              mixup_alpha: float = 0.0, early_stop_epochs: int | None = None,
              batch_size: int = 128, learning_rate: float = 1e-3, seed: int = 0,
              opt: OptimizerState | None = None) -> MlpModel:
    """Mini-batch maximum likelihood with Adam; optional mixup and early stopping.

    Early stopping watches the full-dataset training loss and returns the best
    parameters seen once it fails to improve for ``early_stop_epochs`` epochs.
    """
    if len(dataset) == 0 or not dataset.has_both_labels():
        raise ValueError("maximum likelihood training needs both labels present")
    rng = np.random.default_rng(seed)
    arch = model.arch
    opt = opt or OptimizerState("adam", learning_rate, weight_decay)
    params = model.params.copy()
    X, y = dataset.X, dataset.y
    n = len(y)
    best, best_loss, stale = params, np.inf, 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = X[idx], y[idx]
            if mixup_alpha > 0:
                lam = rng.beta(mixup_alpha, mixup_alpha, size=len(idx))
                perm = rng.permutation(len(idx))
                xb = lam[:, None] * xb + (1 - lam[:, None]) * xb[perm]
                yb = lam * yb + (1 - lam) * yb[perm]
            _, g = net.loss_and_grad(arch, params, xb, yb, np.full(len(idx), 1.0 / len(idx)))
            params = opt.apply(params, g)
        if early_stop_epochs:
            loss, _ = net.loss_and_grad(arch, params, X, y, np.full(n, 1.0 / n))
            if loss < best_loss - 1e-12:
                best, best_loss, stale = params.copy(), loss, 0
            else:
                stale += 1
                if stale >= early_stop_epochs:
                    params = best
                    break
    return model.with_params(params)


# ------------------------------------------------------------------ naive CNML


@dataclass(frozen=True)
class Convergence:
    max_steps: int = 5000
    tol: float = 1e-4
    learning_rate: float = 1e-2
    seed: int = 0


def _fit_many(arch, init_params, X, y, conv: Convergence):
    """Full-batch Adam on M independent augmented datasets, in lockstep.

    X: (M, n, d), y: (M, n).  Each fit stops once its gradient norm drops
    below ``conv.tol``.  Returns (params (M, P), steps (M,), converged (M,)).
    """
    M = X.shape[0]
    params = np.repeat(init_params[None, :], M, axis=0)
    w = np.ones(y.shape)
    opt = OptimizerState("adam", conv.learning_rate)
    steps = np.zeros(M, dtype=np.int64)
    active = np.ones(M, dtype=bool)
    for _ in range(conv.max_steps):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        _, g = net.loss_and_grad(arch, params[idx], X[idx], y[idx], w[idx])
        done = np.linalg.norm(g, axis=1) < conv.tol
        if np.any(done):
            active[idx[done]] = False
        g[done] = 0.0
        full = np.zeros_like(params)
        full[idx] = g
        new = opt.apply(params, full)
        params[idx[~done]] = new[idx[~done]]
        steps[idx[~done]] += 1
    return params, steps, ~active


def cnml_naive_batch(arch: MlpArchitecture, dataset: LabeledDataset, queries,
                     convergence: Convergence = Convergence()) -> list[CnmlPrediction]:
    """Exact CNML: refit a fresh model on D + (x_q, y') for both labels and normalise."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != dataset.feature_dim:
        raise ValueError(f"query dimension {queries.shape[1]} != dataset dimension {dataset.feature_dim}")
    init = net.init_model(arch, convergence.seed).params
    Q = len(queries)
    n = len(dataset)
    X = np.empty((2 * Q, n + 1, dataset.feature_dim))
    X[:, :n] = dataset.X
    X[:, n] = np.repeat(queries, 2, axis=0)
    y = np.empty((2 * Q, n + 1))
    y[:, :n] = dataset.y
    y[:, n] = np.tile([0.0, 1.0], Q)
    params, steps, conv = _fit_many(arch, init, X, y, convergence)
    p = net.sigmoid(net.logits(arch, params, X[:, n:n + 1])[:, 0])
    out = []
    for q in range(Q):
        raw0 = 1.0 - p[2 * q]
        raw1 = p[2 * q + 1]
        out.append(CnmlPrediction.from_raw(raw0, raw1, max(steps[2 * q], steps[2 * q + 1]),
                                           bool(conv[2 * q] and conv[2 * q + 1])))
    return out


def cnml_naive(arch, dataset, x_q, convergence: Convergence = Convergence()) -> CnmlPrediction:
    return cnml_naive_batch(arch, dataset, np.asarray(x_q, dtype=np.float64)[None, :], convergence)[0]


# ---------------------------------------------------------------- tabular CNML


def cnml_tabular_exact(n_visits: int, n_goal: int) -> Fraction:
    return Fraction(n_goal + 1, n_visits + n_goal + 2)


def cnml_tabular(counts, state_id) -> float:
    """(G + 1) / (N + G + 2) for the counts of ``state_id`` (absent ids count as zero)."""
    n_visits, n_goal = counts.get(state_id)
    return float(cnml_tabular_exact(n_visits, n_goal))


def cnml_tabular_array(N, G) -> np.ndarray:
    N = np.asarray(N, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    return (G + 1.0) / (N + G + 2.0)


# ------------------------------------------------------------------- meta-NML


@dataclass(frozen=True)
class MetaTask:
    index: int
    label: int


def build_meta_tasks(dataset_or_n) -> list[MetaTask]:
    n = dataset_or_n if isinstance(dataset_or_n, (int, np.integer)) else len(dataset_or_n)
    return [MetaTask(i, y) for i in range(int(n)) for y in (0, 1)]


def kernel_weight(x, x_q, lambda_dist: float):
    """exp(-2.3 / lambda_dist * ||x - x_q||); equals ~0.1 at distance lambda_dist."""
    if lambda_dist <= 0:
        raise ValueError("lambda_dist must be positive")
    x = np.asarray(x, dtype=np.float64)
    x_q = np.asarray(x_q, dtype=np.float64)
    d = np.sqrt(((x - x_q) ** 2).sum(axis=-1))
    out = np.exp(-2.3 / lambda_dist * d)
    return float(out) if np.ndim(out) == 0 else out


def query_importance_weight(n_dataset: int, batch_size: int) -> float:
    if n_dataset < 1 or batch_size < 2:
        raise ValueError("need n_dataset >= 1 and batch_size >= 2")
    return 1.0 / math.ceil(n_dataset / (batch_size - 1))


@dataclass(frozen=True)
class MetaNmlConfig:
    inner_lr: float = 1e-2
    batch_size: int = 64
    tasks_per_epoch: int = 128
    lambda_dist: float = 0.5
    k_query: int = 1
    retrain_interval: int = 1
    n_test: int = 2048
    meta_lr: float = 1e-3
    meta_batch_size: int = 16
    meta_gradient: str = "first_order"
    use_kernel: bool = True

    def __post_init__(self):
        if self.inner_lr <= 0 or self.lambda_dist <= 0:
            raise ValueError("inner_lr and lambda_dist must be positive")
        if self.batch_size < 2 or self.tasks_per_epoch < 1 or self.k_query < 0:
            raise ValueError("invalid meta-NML sizes")
        if self.meta_gradient != "first_order":
            raise ValueError("only first_order meta-gradients are implemented")


def _kernel(cfg, X, q):
    if not cfg.use_kernel:
        return np.ones(X.shape[:-1])
    return kernel_weight(X, q, cfg.lambda_dist)


def meta_train(model: MlpModel, dataset: LabeledDataset, config: MetaNmlConfig, epochs: int,
               warm_start: MlpModel | None = None, task_points=None, seed: int = 0,
               opt: OptimizerState | None = None, allow_single_class: bool = False) -> MlpModel:
    """First-order MAML over label-augmented tasks.

    A task is a query point (from ``task_points``, default the dataset inputs)
    paired with a proposed label.  The inner step uses a random batch of
    ``batch_size - 1`` dataset points plus the query (importance-weighted),
    all kernel-weighted around the query.  The outer loss is the same weighted
    objective on a fresh batch, evaluated at the adapted parameters.
    """
    base = warm_start if warm_start is not None else model
    if warm_start is not None and warm_start.arch != model.arch:
        raise ValueError("warm-start architecture does not match the model")
    if epochs <= 0:
        return base
    if len(dataset) == 0 or not (allow_single_class or dataset.has_both_labels()):
        raise ValueError("meta-training needs both labels present in the dataset")
    arch = base.arch
    rng = np.random.default_rng(seed)
    pts = dataset.X if task_points is None else np.atleast_2d(np.asarray(task_points, dtype=np.float64))
    n_tasks = 2 * len(pts)
    N = len(dataset)
    bm1 = min(config.batch_size - 1, N)
    w_imp = query_importance_weight(N, config.batch_size)
    opt = opt or OptimizerState("adam", config.meta_lr)
    params = base.params.copy()
    alpha = config.inner_lr
    for _ in range(epochs):
        chosen = rng.choice(n_tasks, min(config.tasks_per_epoch, n_tasks), replace=False)
        for start in range(0, len(chosen), config.meta_batch_size):
            tasks = chosen[start:start + config.meta_batch_size]
            T = len(tasks)
            q = pts[tasks // 2]
            lab = (tasks % 2).astype(np.float64)

            def augmented_batch():
                idx = np.stack([rng.choice(N, bm1, replace=False) for _ in range(T)])
                Xb = np.concatenate([dataset.X[idx], q[:, None, :]], axis=1)
                yb = np.concatenate([dataset.y[idx], lab[:, None]], axis=1)
                wb = _kernel(config, Xb, q[:, None, :])
                wb[:, -1] = w_imp
                return Xb, yb, wb

            Xi, yi, wi = augmented_batch()
            _, g_in = net.loss_and_grad(arch, params, Xi, yi, wi)
            adapted = params[None, :] - alpha * g_in
            Xo, yo, wo = augmented_batch()
            _, g_out = net.loss_and_grad(arch, adapted, Xo, yo, wo)
            params = opt.apply(params, g_out.mean(axis=0))
    return base.with_params(params)


def _unique_rows(dataset):
    """Collapse duplicate (x, y) rows into multiplicities."""
    key = np.concatenate([dataset.X, dataset.y[:, None]], axis=1)
    uniq, counts = np.unique(key, axis=0, return_counts=True)
    return uniq[:, :-1], uniq[:, -1], counts.astype(np.float64)


def meta_nml_probs(meta_model: MlpModel, dataset: LabeledDataset, queries,
                   config: MetaNmlConfig, k_query: int | None = None, chunk: int = 256):
    """Vectorised meta-NML over many queries.

    Each adaptation step follows the expected minibatch gradient: the
    kernel-weighted loss on the whole dataset plus the query, scaled by the
    query's importance weight (the chance that a given point falls in a batch
    of ``batch_size - 1`` when cycling through the data).
    Returns (raw0, raw1, p1) arrays.
    """
    arch = meta_model.arch
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != arch.input_dim:
        raise ValueError(f"query dimension {queries.shape[1]} != model input {arch.input_dim}")
    k = config.k_query if k_query is None else int(k_query)
    theta = meta_model.params
    Q = len(queries)
    if k == 0:
        p = net.sigmoid(net.logits(arch, theta, queries))
        return 1.0 - p, p, p
    Xu, yu, mult = _unique_rows(dataset)
    w_imp = query_importance_weight(len(dataset), config.batch_size)
    step = config.inner_lr * w_imp

    # first step: every query starts from the same theta, so per-example
    # dataset gradients are shared across queries
    g_data = np.zeros((Q, arch.n_params))
    for s in range(0, len(yu), chunk):
        sl = slice(s, s + chunk)
        _, G = net.loss_and_grad(arch, theta, Xu[sl], yu[sl], mult[sl], per_example=True)
        Kq = _kernel(config, Xu[None, sl, :], queries[:, None, :])
        g_data += Kq @ G
    _, Gq1 = net.loss_and_grad(arch, theta, queries, np.ones(Q), np.ones(Q), per_example=True)
    _, Gq0 = net.loss_and_grad(arch, theta, queries, np.zeros(Q), np.ones(Q), per_example=True)
    theta1 = theta[None, :] - step * (g_data + Gq1)
    theta0 = theta[None, :] - step * (g_data + Gq0)

    if k > 1:
        Kfull = _kernel(config, Xu[None, :, :], queries[:, None, :]) * mult[None, :]
        qx = queries[:, None, :]
        for _ in range(k - 1):
            for th, lab in ((theta1, 1.0), (theta0, 0.0)):
                _, gd = net.loss_and_grad(arch, th, Xu, yu, Kfull)
                _, gq = net.loss_and_grad(arch, th, qx, np.full((Q, 1), lab), np.ones((Q, 1)))
                th -= step * (gd + gq)

    qx = queries[:, None, :]
    raw1 = net.sigmoid(net.logits(arch, theta1, qx)[:, 0])
    raw0 = 1.0 - net.sigmoid(net.logits(arch, theta0, qx)[:, 0])
    return raw0, raw1, raw1 / (raw0 + raw1)


def cnml_meta_query(meta_model, dataset, x_q, config: MetaNmlConfig) -> CnmlPrediction:
    x_q = np.asarray(x_q, dtype=np.float64)
    if x_q.shape != (meta_model.arch.input_dim,):
        raise ValueError(f"query must have shape ({meta_model.arch.input_dim},), got {x_q.shape}")
    raw0, raw1, _ = meta_nml_probs(meta_model, dataset, x_q[None, :], config)
    return CnmlPrediction.from_raw(raw0[0], raw1[0], config.k_query)


# ------------------------------------------------------------- reward handles


@dataclass
class ClassifierHandle:
    """Everything needed to turn states into success probabilities.

    kind: one of ``mle``, ``cnml_naive``, ``cnml_meta``, ``tabular``.
    """

    kind: str
    model: MlpModel | None = None
    dataset: LabeledDataset | None = None
    config: MetaNmlConfig = field(default_factory=MetaNmlConfig)
    convergence: Convergence = field(default_factory=Convergence)
    counts: object = None
    state_id: object = None

    def __post_init__(self):
        if self.kind not in ("mle", "cnml_naive", "cnml_meta", "tabular"):
            raise ValueError(f"unknown classifier kind {self.kind!r}")


def assign_rewards(handle: ClassifierHandle, states) -> np.ndarray:
    """r(s) = p(e=1 | s) under the handle's classifier, for a batch of states."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if handle.kind == "mle":
        return net.forward(handle.model, states)
    if handle.kind == "cnml_meta":
        return meta_nml_probs(handle.model, handle.dataset, states, handle.config)[2]
    if handle.kind == "cnml_naive":
        preds = cnml_naive_batch(handle.model.arch, handle.dataset, states, handle.convergence)
        return np.array([p.p_label1 for p in preds])
    ids = handle.state_id(states)
    c = handle.counts
    return cnml_tabular_array(c.N[ids], c.G[ids])


def with_k_query(config: MetaNmlConfig, k: int) -> MetaNmlConfig:
    return replace(config, k_query=int(k))
