"""Numba and numpy kernel paths agree, and soft-Q sweeps match plain oracles."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmlrl import kernels, maze
from nmlrl.maze import ACTIONS, STEP_SCALE

numba_only = pytest.mark.skipif(kernels.njit is None, reason="numba not installed")


@pytest.fixture(scope="module")
def world():
    return maze.make_maze("spiral")


# ------------------------------------------------------------------ dynamics


@numba_only
@given(st.floats(-3.99, 3.99), st.floats(-3.99, 3.99), st.floats(-2, 2), st.floats(-2, 2))
@settings(max_examples=200, deadline=None)
def test_step_paths_agree(world, x, y, ax, ay):
    a = kernels._step_nb(world.walls, x, y, ax, ay, STEP_SCALE)
    b = kernels._step_py(world.walls, x, y, ax, ay, STEP_SCALE)
    assert a == b


@numba_only
@pytest.mark.parametrize("greedy", [False, True])
def test_rollout_paths_agree(world, greedy):
    rng = np.random.default_rng(0)
    n = world.cell_grid
    q = rng.normal(size=(n * n, len(ACTIONS)))
    if greedy:
        q = np.round(q)  # plenty of ties
    u = rng.random(2000)
    outs = []
    for fn in (kernels._rollout_nb, kernels._rollout_py):
        o = [np.zeros((2000, 4)), *(np.zeros(2000, dtype=np.int64) for _ in range(4))]
        fn(world.walls, world.start, q, ACTIONS, STEP_SCALE, 0.5, 100, 2000, n, u, greedy, *o)
        outs.append(o)
    for a, b in zip(*outs):
        np.testing.assert_array_equal(a, b)


def test_rollout_resets_every_horizon(world):
    q = np.zeros((world.cell_grid ** 2, len(ACTIONS)))
    out = kernels.rollout(world.walls, world.start, q, ACTIONS, STEP_SCALE, 1.0, 7, 30,
                          world.cell_grid, np.random.default_rng(0).random(30))
    assert out["t"].tolist() == [i % 7 for i in range(30)]
    for i in range(0, 30, 7):
        np.testing.assert_array_equal(out["states"][i, :2], world.start)


def test_boltzmann_action_frequencies():
    # single free cell, fixed Q row: empirical action frequencies follow softmax
    q = np.array([[1.0, 0.0, 0.5, -1.0, 0.0, 0.0, 0.2, 0.3]])
    tau = 0.5
    u = np.random.default_rng(0).random(40_000)
    out = kernels.rollout(np.zeros((0, 4)), [0.0, 0.0], np.repeat(q, 4, 0), ACTIONS, 0.0, tau,
                          10, len(u), 2, u)
    freq = np.bincount(out["actions"], minlength=8) / len(u)
    p = np.exp(q[0] / tau) / np.exp(q[0] / tau).sum()
    np.testing.assert_allclose(freq, p, atol=0.01)


# ---------------------------------------------------------------- visibility


@numba_only
def test_blocked_paths_agree(world):
    rng = np.random.default_rng(2)
    p = rng.uniform(-4, 4, (40, 2))
    q = rng.uniform(-4, 4, (30, 2))
    # include wall endpoints to exercise the touching cases
    q[:6] = world.walls[:3].reshape(-1, 2)
    a = kernels._blocked_nb(p, q, world.walls)
    np.testing.assert_array_equal(a, kernels._blocked_py(p, q, world.walls))
    np.testing.assert_array_equal(a, kernels._blocked_np(p, q, world.walls))


def test_blocked_simple_cases():
    wall = np.array([[0.0, -1.0, 0.0, 1.0]])
    assert kernels.segments_blocked([[-1, 0]], [[1, 0]], wall)[0, 0]
    assert not kernels.segments_blocked([[-1, 2]], [[1, 2]], wall)[0, 0]
    assert kernels.segments_blocked([[-1, 1]], [[1, 1]], wall)[0, 0]  # grazes the endpoint
    assert not kernels.segments_blocked([[-1, 0]], [[1, 0]], np.zeros((0, 4))).any()


# -------------------------------------------------------------------- soft Q


def random_batch(rng, n_states, n):
    return (rng.integers(0, n_states, n), rng.integers(0, 8, n), rng.integers(0, n_states, n),
            rng.normal(size=n), rng.uniform(0, 1, n))


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_soft_q_paths_agree(seed):
    rng = np.random.default_rng(seed)
    q0 = rng.normal(size=(12, 8))
    s, a, s2, r, lr = random_batch(rng, 12, 50)
    ref = q0.copy()
    kernels._soft_q_py(ref, s, a, s2, r, lr, 0.9, 0.3)
    npy = q0.copy()
    kernels._soft_q_np(npy, s, a, s2, r, lr, 0.9, 0.3)
    np.testing.assert_allclose(npy, ref, rtol=1e-12, atol=1e-12)
    if kernels.njit is not None:
        nb = q0.copy()
        kernels._soft_q_nb(nb, s, a, s2, r, lr, 0.9, 0.3)
        np.testing.assert_allclose(nb, ref, rtol=1e-12, atol=1e-12)


def test_soft_q_single_update_by_hand():
    q = np.zeros((2, 8))
    q[1] = np.log(np.arange(1, 9))  # tau=1 soft value of row 1 is log(36 / 8)
    kernels.soft_q_update(q, [0], [3], [1], [2.0], 0.5, 0.9, 1.0)
    assert q[0, 3] == pytest.approx(0.5 * (2.0 + 0.9 * np.log(4.5)))


def test_soft_value_tends_to_max():
    q = np.random.default_rng(0).normal(size=(5, 8))
    np.testing.assert_allclose(kernels.soft_values(q, 1e-6), q.max(axis=1), atol=1e-5)


def test_soft_value_bracketed_by_mean_and_max():
    q = np.random.default_rng(1).normal(size=(5, 8))
    tau = 0.3
    v = kernels.soft_values(q, tau)
    assert np.all(v <= q.max(axis=1) + 1e-12)
    assert np.all(v >= q.mean(axis=1) - 1e-12)  # Jensen
    assert np.all(v >= q.max(axis=1) - tau * np.log(8) - 1e-12)


def test_constant_rows_have_their_own_value():
    q = np.tile(np.array([[0.0], [2.5]]), (1, 8))
    np.testing.assert_allclose(kernels.soft_values(q, 0.7), [0.0, 2.5], atol=1e-15)


def grid_model(n):
    """Deterministic 4-neighbour n x n grid; actions past the edge stay put."""
    moves = [(1, 0), (0, 1), (-1, 0), (0, -1), (0, 0), (0, 0), (0, 0), (0, 0)]
    nxt = np.zeros((n * n, 8), dtype=np.int64)
    for s in range(n * n):
        i, j = s % n, s // n
        for a, (di, dj) in enumerate(moves):
            ni, nj = i + di, j + dj
            nxt[s, a] = nj * n + ni if 0 <= ni < n and 0 <= nj < n else s
    return nxt


def test_full_sweeps_match_soft_value_iteration():
    n, gamma, tau = 5, 0.9, 0.05
    nxt = grid_model(n)
    reward = np.zeros(n * n)
    reward[n * n - 1] = 1.0
    # oracle: plain soft value iteration, Q(s,a) = r(s') + gamma V(s'),
    # V = tau log mean exp(Q / tau)
    v = np.zeros(n * n)
    for _ in range(2000):
        qv = reward[nxt] + gamma * v[nxt]
        m = qv.max(axis=1)
        v = m + tau * np.log(np.exp((qv - m[:, None]) / tau).mean(axis=1))
    s = np.repeat(np.arange(n * n), 8)
    a = np.tile(np.arange(8), n * n)
    s2 = nxt[s, a]
    q = np.zeros((n * n, 8))
    for _ in range(2000):
        kernels.soft_q_update(q, s, a, s2, reward[s2], 1.0, gamma, tau)
    np.testing.assert_allclose(q, reward[nxt] + gamma * v[nxt], atol=1e-9)
    # greedy policy walks toward the rewarding corner
    assert q[0].argmax() in (0, 1)


def test_soft_q_zero_lr_is_identity():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(4, 8))
    before = q.copy()
    s, a, s2, r, _ = random_batch(rng, 4, 10)
    kernels.soft_q_update(q, s, a, s2, r, 0.0, 0.99, 0.1)
    np.testing.assert_array_equal(q, before)


def test_env_flag_parsing(monkeypatch):
    import importlib
    monkeypatch.setenv("NMLRL_DISABLE_NUMBA", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.NUMBA_DISABLED and not mod.USE_NUMBA
    finally:
        monkeypatch.delenv("NMLRL_DISABLE_NUMBA")
        importlib.reload(kernels)


@numba_only
def test_benchmark_script_runs(tmp_path):
    import importlib.util
    from pathlib import Path
    path = Path(__file__).parent.parent / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    mod.main(["--repeat", "1", "--out", str(tmp_path / "k.csv")])
    lines = (tmp_path / "k.csv").read_text().splitlines()
    assert lines[0] == "kernel,numba_s,numpy_s" and len(lines) == 4
