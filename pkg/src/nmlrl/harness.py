"""Outcome-driven RL loop: classifier rewards driving tabular soft Q-learning.

The policy acts on a grid of cells with eight compass actions.  Classifiers
see (possibly encoded) continuous coordinates, and their success probability
on each cell is the reward for entering that cell.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels, maze, net
from .classifiers import (LabeledDataset, MetaNmlConfig, balanced_dataset, cnml_tabular_array,
                          meta_nml_probs, meta_train, mle_train)
from .net import MlpArchitecture, MlpModel, OptimizerState

METHODS = ("mural", "vice", "vice_count_bonus", "sparse", "count_only_ablation",
           "no_meta_ablation")
ENVS = ("zigzag", "spiral", "double_sided", "zigzag_shuffled")
LOG_COLUMNS = ("epoch", "success_rate", "final_distance", "coverage", "clf_loss",
               "mean_reward_pos", "mean_reward_neg", "wall_clock_s", "hidden_reward_found")
N_ACTIONS = len(maze.ACTIONS)
SHUFFLED_SIDE = 16
REWARD_PROBE = 64

# meta-NML settings tuned for the maze runs (see README for the protocol)
RL_META = MetaNmlConfig(inner_lr=0.5, batch_size=64, tasks_per_epoch=128, lambda_dist=0.5,
                        k_query=1, retrain_interval=1, n_test=512, meta_lr=1e-3,
                        meta_batch_size=16)


@dataclass(frozen=True)
class RunConfig:
    method: str
    env: str = "zigzag"
    seed: int = 0
    epochs: int = 200
    steps_per_epoch: int = 1000
    horizon: int = maze.HORIZON
    meta: MetaNmlConfig = RL_META
    n_train: int = 64
    hidden_sizes: tuple = (32, 32)
    meta_epochs: int = 3
    clf_lr: float = 1e-3
    n_vice: int = 2
    mixup_alpha: float = 1.0
    weight_decay: float = 5e-3
    bonus_scale: float = 0.25
    n_goal_examples: int = 150
    buffer_capacity: int = 100_000
    gamma: float = 0.99
    temperature: float = 0.1
    q_lr: float = 1.0
    sweeps: int = 100
    eval_rollouts: int = 20
    checkpoint_every: int = 0
    log_wall_clock: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.env not in ENVS:
            raise ValueError(f"unknown env {self.env!r}; expected one of {ENVS}")
        if self.seed is None:
            raise ValueError("seed is mandatory")
        if self.env == "zigzag_shuffled" and self.method in ("vice_count_bonus", "sparse"):
            # these rewards read true coordinates, which the shuffled task hides
            raise ValueError(f"method {self.method!r} is not defined on the shuffled maze")
        for name in ("epochs", "steps_per_epoch", "horizon", "n_train", "n_vice",
                     "n_goal_examples", "buffer_capacity", "eval_rollouts", "sweeps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (0 <= self.gamma < 1) or self.temperature <= 0 or not (0 < self.q_lr <= 1):
            raise ValueError("need 0 <= gamma < 1, temperature > 0 and 0 < q_lr <= 1")
        if self.meta.n_test < 2 or self.meta.n_test % 2:
            raise ValueError("meta.n_test must be an even number >= 2")


# ------------------------------------------------------------------ buffers


class OutcomeBuffers:
    """Fixed positives S+ and a FIFO replay of on-policy negatives S-."""

    def __init__(self, positives, capacity: int):
        pos = np.array(positives, dtype=np.float64)
        pos.setflags(write=False)
        self._pos = pos
        self.capacity = int(capacity)
        self._neg = np.zeros((self.capacity, pos.shape[1]))
        self._n = 0
        self._head = 0

    @property
    def positives(self) -> np.ndarray:
        return self._pos

    def positives_hash(self) -> int:
        return hash(self._pos.tobytes())

    def __len__(self):
        return self._n

    def add_negatives(self, states) -> None:
        states = np.asarray(states, dtype=np.float64).reshape(-1, self._pos.shape[1])
        if len(states) >= self.capacity:
            states = states[-self.capacity:]
        k = len(states)
        idx = (self._head + np.arange(k)) % self.capacity
        self._neg[idx] = states
        self._head = (self._head + k) % self.capacity
        self._n = min(self._n + k, self.capacity)

    def negatives(self) -> np.ndarray:
        """Oldest first."""
        if self._n < self.capacity:
            return self._neg[:self._n].copy()
        return np.roll(self._neg, -self._head, axis=0)

    def sample_negatives(self, k, rng) -> np.ndarray:
        if self._n == 0:
            raise ValueError("no negatives collected yet")
        return self.negatives()[rng.choice(self._n, k, replace=self._n < k)]


# ------------------------------------------------------------------ backend


@dataclass
class SoftQBackend:
    """Q-table over (cell, action) plus the empirical transition model.

    ``update`` runs synchronous soft backups over every transition seen so
    far, each weighted by its empirical probability under its (cell, action).
    Pairs never tried are modelled as self-loops.
    """

    n_states: int
    temperature: float
    learning_rate: float = 1.0
    gamma: float = 0.99
    n_actions: int = N_ACTIONS
    q: np.ndarray = None
    keys: np.ndarray = None
    counts: np.ndarray = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.q is None:
            self.q = np.zeros((self.n_states, self.n_actions))
        if self.keys is None:
            self.keys = np.zeros(0, dtype=np.int64)
            self.counts = np.zeros(0, dtype=np.int64)

    def record(self, s, a, s2) -> None:
        new = (np.asarray(s, np.int64) * self.n_actions + np.asarray(a, np.int64)) * self.n_states \
            + np.asarray(s2, np.int64)
        allk = np.concatenate([self.keys, new])
        w = np.concatenate([self.counts, np.ones(len(new), dtype=np.int64)])
        self.keys, inv = np.unique(allk, return_inverse=True)
        self.counts = np.bincount(inv, weights=w).astype(np.int64)

    def model_arrays(self):
        """(s, a, s2, prob) for recorded transitions plus self-loops for untried pairs."""
        sa = self.keys // self.n_states
        s2 = self.keys % self.n_states
        tot = np.bincount(sa, weights=self.counts, minlength=self.n_states * self.n_actions)
        prob = self.counts / tot[sa]
        untried = np.flatnonzero(tot == 0)
        sa = np.concatenate([sa, untried])
        s2 = np.concatenate([s2, untried // self.n_actions])
        prob = np.concatenate([prob, np.ones(len(untried))])
        return sa // self.n_actions, sa % self.n_actions, s2, prob

    def policy(self) -> np.ndarray:
        z = self.q / self.temperature
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def to_bytes(self) -> bytes:
        head = f"qtable-v1 {self.n_states} {self.n_actions} {self.temperature!r} {self.gamma!r}\n"
        return head.encode() + self.q.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SoftQBackend":
        head, _, body = blob.partition(b"\n")
        parts = head.decode().split()
        if len(parts) != 5 or parts[0] != "qtable-v1":
            raise ValueError("not a q-table blob")
        ns, na = int(parts[1]), int(parts[2])
        q = np.frombuffer(body, dtype="<f8")
        if q.size != ns * na:
            raise ValueError("q-table blob is truncated")
        return cls(ns, float(parts[3]), gamma=float(parts[4]), n_actions=na,
                   q=q.reshape(ns, na).copy())


def backend_update(backend: SoftQBackend, s, a, s2, r, sweeps: int = 1) -> SoftQBackend:
    """Soft Q-learning sweeps over a batch of weighted transitions.

    ``r`` is per transition.  With ``backend.learning_rate = 1`` and the
    empirical weights from ``model_arrays`` each sweep is an exact soft
    Bellman backup.
    """
    r = np.asarray(r, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite (got NaN or inf)")
    s = np.asarray(s, dtype=np.int64)
    for _ in range(sweeps):
        backend.q = kernels.soft_q_update(backend.q, s, a, s2, r, backend.learning_rate,
                                          backend.gamma, backend.temperature)
    if not np.all(np.isfinite(backend.q)):
        raise FloatingPointError("Q-table diverged")
    return backend


def plan(backend: SoftQBackend, cell_reward, sweeps: int) -> SoftQBackend:
    """Backups over the empirical model with reward ``cell_reward[s2]``."""
    s, a, s2, prob = backend.model_arrays()
    r = np.asarray(cell_reward, dtype=np.float64)[s2]
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite (got NaN or inf)")
    lr = backend.learning_rate * prob
    for _ in range(sweeps):
        backend.q = kernels.soft_q_update(backend.q, s, a, s2, r, lr,
                                          backend.gamma, backend.temperature)
    return backend


# --------------------------------------------------------------- environment


@dataclass
class Env:
    world: maze.MazeWorld
    encoding: maze.StateEncoding
    n_side: int

    def encode(self, states) -> np.ndarray:
        return maze.encode_state(self.world, self.encoding, states)

    def cell_states(self) -> np.ndarray:
        return self.world.cell_centers(self.n_side)


def make_env(kind: str, seed: int = 0, layout_text: str | None = None) -> Env:
    """Environment for ``kind``; ``layout_text`` replaces the shipped layout."""
    shuffled = kind == "zigzag_shuffled"
    grid = SHUFFLED_SIDE if shuffled else 40
    if layout_text:
        world = maze.parse_layout(layout_text, name=kind, cell_grid=grid)
    else:
        world = maze.make_maze("zigzag" if shuffled else kind, cell_grid=grid)
    if shuffled:
        enc = maze.make_encoding("shuffled_discrete", SHUFFLED_SIDE, seed)
        return Env(world, enc, SHUFFLED_SIDE)
    return Env(world, maze.make_encoding("continuous_xy"), world.cell_grid)


def evaluate_policy(backend: SoftQBackend, world: maze.MazeWorld, n_rollouts: int, seed,
                    horizon: int = maze.HORIZON, n_side: int | None = None):
    """Greedy rollouts from the start.  Returns (success_rate, mean final distance)."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_side = world.cell_grid if n_side is None else n_side
    n = n_rollouts * horizon
    out = kernels.rollout(world.walls, world.start, backend.q, maze.ACTIONS, maze.STEP_SCALE,
                          backend.temperature, horizon, n, n_side, rng.random(n), greedy=True)
    d = world.distance_to_goal(out["states"][:, 2:]).reshape(n_rollouts, horizon)
    success = (d <= maze.SUCCESS_THRESHOLD).any(axis=1)
    return float(success.mean()), float(d[:, -1].mean())


def coverage(counts: maze.TabularCounts, world: maze.MazeWorld) -> float:
    free = maze.free_cells(world, counts.n_side)
    return float(((counts.N > 0) & free).sum() / free.sum())


# ------------------------------------------------------------------ rewards


@dataclass
class ClassifierState:
    """Everything reward_for_method needs; also what a checkpoint stores."""

    arch: MlpArchitecture
    meta_model: MlpModel | None = None
    mle_model: MlpModel | None = None
    dataset: LabeledDataset | None = None
    neg_dataset: LabeledDataset | None = None
    counts: maze.TabularCounts | None = None
    env: Env | None = None


def _encode(cfg: RunConfig, clf: ClassifierState, s):
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    return clf.env.encode(s) if clf.env is not None else s


def reward_for_method(config: RunConfig, clf: ClassifierState, s) -> np.ndarray:
    """Reward for raw maze states ``s`` (one (2,) point or a batch)."""
    raw = np.atleast_2d(np.asarray(s, dtype=np.float64))
    m = config.method
    if m == "sparse":
        world = clf.env.world
        return (world.distance_to_goal(raw) <= maze.SUCCESS_THRESHOLD).astype(np.float64)
    x = _encode(config, clf, raw)
    if m == "mural":
        r = meta_nml_probs(clf.meta_model, clf.dataset, x, config.meta)[2]
    elif m == "no_meta_ablation":
        r = meta_nml_probs(clf.mle_model, clf.dataset, x, config.meta, k_query=1)[2]
    else:
        r = net.forward(clf.mle_model, x)
        if m == "vice_count_bonus":
            n = clf.counts.N[maze.cell_index(raw, clf.counts.n_side)]
            r = r + config.bonus_scale / (n + 2.0)
        elif m == "count_only_ablation":
            r = r + meta_nml_probs(clf.meta_model, clf.neg_dataset, x, config.meta)[2]
    return np.asarray(r, dtype=np.float64)


def _classifier_loss(model: MlpModel, ds: LabeledDataset) -> float:
    n = len(ds)
    loss, _ = net.loss_and_grad(model.arch, model.params, ds.X, ds.y, np.full(n, 1.0 / n))
    return float(loss)


# --------------------------------------------------------------------- log


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append({k: row[k] for k in LOG_COLUMNS})

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def __len__(self):
        return len(self.rows)

    @staticmethod
    def format_row(row) -> list:
        out = []
        for k in LOG_COLUMNS:
            v = row[k]
            out.append(str(int(v)) if k in ("epoch", "hidden_reward_found") else repr(float(v)))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow(self.format_row(r))
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path) -> "TrainingLog":
        log = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
                raise ValueError(f"{path}: unexpected log header {reader.fieldnames}")
            for row in reader:
                log.rows.append({k: (int(row[k]) if k in ("epoch", "hidden_reward_found")
                                     else float(row[k])) for k in LOG_COLUMNS})
        return log


# --------------------------------------------------------------- checkpoints


def save_classifier(path, config: RunConfig, clf: ClassifierState) -> None:
    """Write the classifier state as an npz archive (no pickles)."""
    arrays = {"method": np.array(config.method), "env": np.array(config.env),
              "seed": np.array(config.seed), "bonus_scale": np.array(config.bonus_scale)}
    if clf.env is not None:
        arrays["layout"] = np.array(maze.format_layout(clf.env.world))
    for name in ("meta_model", "mle_model"):
        m = getattr(clf, name)
        if m is not None:
            arrays[name] = np.frombuffer(net.to_bytes(m), dtype=np.uint8)
    for name in ("dataset", "neg_dataset"):
        ds = getattr(clf, name)
        if ds is not None:
            arrays[name + "_X"], arrays[name + "_y"] = ds.X, ds.y
    if clf.counts is not None:
        arrays["counts_N"], arrays["counts_G"] = clf.counts.N, clf.counts.G
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_classifier(path):
    """Returns (RunConfig, ClassifierState).

    The config carries only what reward evaluation needs (method, env, seed,
    bonus scale); other fields are defaults.
    """
    with np.load(path, allow_pickle=False) as z:
        method, env_kind, seed = str(z["method"]), str(z["env"]), int(z["seed"])
        bonus = float(z["bonus_scale"])
        layout = str(z["layout"]) if "layout" in z else None
        models = {k: net.from_bytes(z[k].tobytes()) for k in ("meta_model", "mle_model") if k in z}
        data = {k: LabeledDataset(z[k + "_X"], z[k + "_y"]) for k in ("dataset", "neg_dataset")
                if k + "_X" in z}
        counts = None
        if "counts_N" in z:
            n_side = int(round(np.sqrt(len(z["counts_N"]))))
            counts = maze.TabularCounts(n_side, z["counts_N"], z["counts_G"])
    arch = next(iter(models.values())).arch if models else None
    clf = ClassifierState(arch, models.get("meta_model"), models.get("mle_model"),
                          data.get("dataset"), data.get("neg_dataset"), counts,
                          make_env(env_kind, _stream_seeds(seed)["env"], layout))
    cfg = RunConfig(method, env_kind, seed, bonus_scale=bonus)
    if clf.arch is not None:
        cfg = replace(cfg, hidden_sizes=clf.arch.hidden_sizes)
    return cfg, clf


def save_tabular_classifier(path, counts: maze.TabularCounts, env_kind: str = "zigzag") -> None:
    """Checkpoint holding only cell counts; its reward is the tabular CNML value."""
    with open(path, "wb") as fh:
        np.savez(fh, method=np.array("tabular"), env=np.array(env_kind), seed=np.array(0),
                 bonus_scale=np.array(0.0), counts_N=counts.N, counts_G=counts.G)


def grid_points(resolution: int) -> np.ndarray:
    """Cell centres of a resolution x resolution grid over the maze bounds."""
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    size = 2 * maze.BOUND / resolution
    c = -maze.BOUND + size * (np.arange(resolution) + 0.5)
    xx, yy = np.meshgrid(c, c)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def reward_grid(ckpt_path, resolution: int):
    """(points, rewards) of a saved classifier on a resolution^2 grid."""
    pts = grid_points(resolution)
    with np.load(ckpt_path, allow_pickle=False) as z:
        method = str(z["method"])
        if method == "tabular":
            n_side = int(round(np.sqrt(len(z["counts_N"]))))
            ids = maze.cell_index(pts, n_side)
            return pts, cnml_tabular_array(z["counts_N"][ids], z["counts_G"][ids])
    cfg, clf = load_classifier(ckpt_path)
    return pts, reward_for_method(cfg, clf, pts)


def _write_checkpoint(root, config, epoch, clf, backend, log) -> None:
    d = Path(root) / f"run_{config.seed}" / f"epoch_{epoch}"
    d.mkdir(parents=True, exist_ok=True)
    save_classifier(d / "classifier.ckpt", config, clf)
    (d / "qtable.bin").write_bytes(backend.to_bytes())
    log.write(d / "log.csv")


# ---------------------------------------------------------------------- run


def _stream_seeds(seed: int) -> dict:
    names = ("env", "classifier-init", "task-sampling", "rollouts")
    kids = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {n: int(k.generate_state(1)[0]) for n, k in zip(names, kids)}


def run(config: RunConfig, out_dir=None, on_epoch=None, layout_text: str | None = None) -> TrainingLog:
    """Train one agent; returns its TrainingLog.

    With ``out_dir`` the log is written to ``out_dir/run_<seed>/log.csv`` and
    flushed after each epoch, and checkpoints land in ``epoch_<n>``
    subdirectories every ``checkpoint_every`` epochs and at the end.
    """
    seeds = _stream_seeds(config.seed)
    env = make_env(config.env, seeds["env"], layout_text)
    world = env.world
    rng_task = np.random.default_rng(seeds["task-sampling"])
    rng_roll = np.random.default_rng(seeds["rollouts"])

    goal_pts = maze.sample_goal_examples(world, config.n_goal_examples, seeds["env"])
    buffers = OutcomeBuffers(env.encode(goal_pts), config.buffer_capacity)
    pos_hash = buffers.positives_hash()
    counts = maze.update_counts(maze.TabularCounts(env.n_side), world, [], goal_pts)
    n_cells = env.n_side ** 2
    backend = SoftQBackend(n_cells, config.temperature, config.q_lr, config.gamma)
    free = maze.free_cells(world, env.n_side)
    centres = env.cell_states()
    hidden_r = maze.in_hidden_region(world, centres).astype(np.float64)

    arch = MlpArchitecture(2, tuple(config.hidden_sizes))
    init = net.init_model(arch, seeds["classifier-init"])
    clf = ClassifierState(arch, meta_model=init, mle_model=init, counts=counts, env=env)
    meta_opt = OptimizerState("adam", config.meta.meta_lr)
    neg_opt = OptimizerState("adam", config.meta.meta_lr)
    mle_opt = OptimizerState("adam", config.clf_lr, config.weight_decay
                             if config.method == "vice" else 0.0)
    uses_meta = config.method in ("mural", "count_only_ablation")
    uses_mle = config.method in ("vice", "vice_count_bonus", "count_only_ablation",
                                 "no_meta_ablation")

    log = TrainingLog()
    run_dir = None
    fh = None
    if out_dir is not None:
        run_dir = Path(out_dir) / f"run_{config.seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        fh = open(run_dir / "log.csv", "w", newline="")
        fh.write(",".join(LOG_COLUMNS) + "\n")
        fh.flush()
    t0 = time.perf_counter()
    hidden_found = False
    clf_loss = 0.0
    try:
        for epoch in range(1, config.epochs + 1):
            # 1. collect on-policy experience
            out = kernels.rollout(world.walls, world.start, backend.q, maze.ACTIONS,
                                  maze.STEP_SCALE, config.temperature, config.horizon,
                                  config.steps_per_epoch, env.n_side,
                                  rng_roll.random(config.steps_per_epoch))
            nxt = out["states"][:, 2:]
            backend.record(out["cells"], out["actions"], out["next_cells"])
            counts = maze.update_counts(counts, world, nxt)
            clf.counts = counts
            enc_new = env.encode(nxt)
            buffers.add_negatives(enc_new)
            hidden_found = hidden_found or bool(maze.in_hidden_region(world, nxt).any())

            # 2. refit the classifier
            if config.method != "sparse" and (epoch - 1) % config.meta.retrain_interval == 0:
                half = config.meta.n_test // 2
                ds = balanced_dataset(buffers.positives, buffers.negatives(), half, rng_task)
                clf.dataset = ds
                sub = int(rng_task.integers(2**31))
                if uses_mle:
                    clf.mle_model = mle_train(clf.mle_model, ds, config.n_vice,
                                              mixup_alpha=config.mixup_alpha if config.method == "vice" else 0.0,
                                              learning_rate=config.clf_lr, seed=sub, opt=mle_opt)
                    clf_loss = _classifier_loss(clf.mle_model, ds)
                if uses_meta:
                    task_pts = buffers.sample_negatives(config.n_train, rng_task)
                    if config.method == "mural":
                        clf.meta_model = meta_train(clf.meta_model, ds, config.meta,
                                                    config.meta_epochs, task_points=task_pts,
                                                    seed=sub, opt=meta_opt)
                        clf_loss = _classifier_loss(clf.meta_model, ds)
                    else:
                        negs = buffers.sample_negatives(config.meta.n_test, rng_task)
                        clf.neg_dataset = LabeledDataset(negs, np.zeros(len(negs)))
                        clf.meta_model = meta_train(clf.meta_model, clf.neg_dataset, config.meta,
                                                    config.meta_epochs, task_points=task_pts,
                                                    seed=sub, opt=neg_opt,
                                                    allow_single_class=True)

            # 3. rewards per cell, then backups
            cell_r = np.zeros(n_cells)
            cell_r[free] = reward_for_method(config, clf, centres[free])
            if not np.all(np.isfinite(cell_r)):
                raise FloatingPointError(f"non-finite reward at epoch {epoch}")
            plan(backend, cell_r + hidden_r, config.sweeps)

            # 4. evaluate and log
            succ, dist = evaluate_policy(backend, world, config.eval_rollouts, rng_roll,
                                         config.horizon, env.n_side)
            probe_pos = goal_pts[rng_task.choice(len(goal_pts), REWARD_PROBE)]
            probe_neg = nxt[rng_task.choice(len(nxt), REWARD_PROBE)]
            r_probe = reward_for_method(config, clf, np.concatenate([probe_pos, probe_neg]))
            row = {"epoch": epoch, "success_rate": succ, "final_distance": dist,
                   "coverage": coverage(counts, world), "clf_loss": clf_loss,
                   "mean_reward_pos": r_probe[:REWARD_PROBE].mean(),
                   "mean_reward_neg": r_probe[REWARD_PROBE:].mean(),
                   "wall_clock_s": time.perf_counter() - t0 if config.log_wall_clock else 0.0,
                   "hidden_reward_found": hidden_found}
            log.append(row)
            if fh is not None:
                fh.write(",".join(TrainingLog.format_row(row)) + "\n")
                fh.flush()
                last = epoch == config.epochs
                if last or (config.checkpoint_every and epoch % config.checkpoint_every == 0):
                    _write_checkpoint(out_dir, config, epoch, clf, backend, log)
            if on_epoch is not None:
                on_epoch(epoch, row, backend, clf)
    finally:
        if fh is not None:
            fh.close()
    if buffers.positives_hash() != pos_hash:
        raise RuntimeError("success examples were modified during the run")
    return log
