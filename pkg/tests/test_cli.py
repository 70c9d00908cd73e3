import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmlrl import cli, config, harness, maze
from nmlrl.config import ConfigError, ExperimentConfig
from nmlrl.harness import RunConfig

SMALL_RUN = """\
[experiment]
schema_version = 1

[run]
method = {method}
env = zigzag
seed = {seed}
epochs = {epochs}
steps_per_epoch = 300
sweeps = 20
eval_rollouts = 2
meta_epochs = 1
log_wall_clock = false
"""


def write_config(tmp_path, name="c.ini", method="mural", seed=0, epochs=3, extra=""):
    p = tmp_path / name
    p.write_text(SMALL_RUN.format(method=method, seed=seed, epochs=epochs) + extra)
    return p


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ config


def test_config_roundtrip_default():
    cfg = ExperimentConfig(RunConfig("mural"))
    assert config.loads(config.dumps(cfg)) == cfg


@given(st.sampled_from(harness.METHODS), st.integers(0, 2**31), st.floats(1e-6, 1.0),
       st.floats(0.0, 0.999), st.lists(st.integers(1, 64), min_size=1, max_size=3),
       st.booleans())
@settings(max_examples=50, deadline=None)
def test_config_roundtrip_property(method, seed, inner_lr, gamma, hidden, wall_clock):
    run = RunConfig(method, seed=seed, gamma=gamma, hidden_sizes=tuple(hidden),
                    log_wall_clock=wall_clock,
                    meta=RunConfig("mural").meta.__class__(inner_lr=inner_lr))
    cfg = ExperimentConfig(run, output_dir="out/x", layout="my.maze")
    once = config.loads(config.dumps(cfg))
    assert once == cfg
    assert config.dumps(once) == config.dumps(cfg)


@pytest.mark.parametrize("text,key", [
    ("[run]\nmethod = mural\nseed = 0\nfoo = 1\n", "foo"),
    ("[run]\nmethod = mural\n", "seed"),
    ("[run]\nseed = 0\n", "method"),
    ("[run]\nmethod = mural\nseed = 0\n[run.meta]\nbar = 2\n", "bar"),
    ("[run]\nmethod = mural\nseed = 0\nepochs = many\n", "epochs"),
    ("[experiment]\nschema_version = 7\n[run]\nmethod = mural\nseed = 0\n", "schema_version"),
    ("[extras]\na = 1\n[run]\nmethod = mural\nseed = 0\n", "extras"),
])
def test_schema_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as exc:
        config.loads(text)
    assert exc.value.key == key


def test_invalid_value_combination_is_a_schema_error():
    with pytest.raises(ConfigError):
        config.loads("[run]\nmethod = sparse\nenv = zigzag_shuffled\nseed = 0\n")


def test_validate_config_command(tmp_path, capsys):
    assert cli.main(["validate-config", str(write_config(tmp_path))]) == 0
    bad = write_config(tmp_path, "bad.ini", extra="foo = 3\n")
    assert cli.main(["validate-config", str(bad)]) == 2
    assert "foo" in capsys.readouterr().err


def test_missing_config_is_runtime_error(tmp_path):
    assert cli.main(["validate-config", str(tmp_path / "nope.ini")]) == 1


# --------------------------------------------------------------------- run


def test_run_unknown_key_exits_2(tmp_path, capsys):
    p = write_config(tmp_path, extra="foo = 1\n")
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "foo" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_run_writes_one_row_per_epoch(tmp_path):
    p = write_config(tmp_path, epochs=4)
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 0
    run_dir = tmp_path / "o" / "run_0"
    rows = read_rows(run_dir / "log.csv")
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3, 4]
    assert list(rows[0]) == list(harness.LOG_COLUMNS)
    assert (run_dir / "epoch_4" / "classifier.ckpt").is_file()
    assert config.load(run_dir / "config.ini") == config.load(p)


def test_run_twice_identical_bytes(tmp_path):
    p = write_config(tmp_path)
    for out in ("a", "b"):
        assert cli.main(["run", str(p), "--out", str(tmp_path / out)]) == 0
    a = tmp_path / "a" / "run_0"
    b = tmp_path / "b" / "run_0"
    assert (a / "log.csv").read_bytes() == (b / "log.csv").read_bytes()
    assert (a / "epoch_3" / "qtable.bin").read_bytes() == (b / "epoch_3" / "qtable.bin").read_bytes()


def test_run_with_custom_layout(tmp_path):
    layout = tmp_path / "l.maze"
    layout.write_text("wall -4 0 2 0\nstart -3 -3\ngoal -3 3 0.5\n")
    p = tmp_path / "c.ini"
    p.write_text(SMALL_RUN.format(method="vice", seed=1, epochs=2)
                 .replace("schema_version = 1", f"schema_version = 1\nlayout = {layout}"))
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 0
    assert len(read_rows(tmp_path / "o" / "run_1" / "log.csv")) == 2


# ------------------------------------------------------------------ exports


@pytest.fixture(scope="module")
def mural_checkpoint(tmp_path_factory):
    d = tmp_path_factory.mktemp("mural")
    p = d / "c.ini"
    p.write_text(SMALL_RUN.format(method="mural", seed=0, epochs=25)
                 .replace("steps_per_epoch = 300", "steps_per_epoch = 1000")
                 .replace("meta_epochs = 1", "meta_epochs = 3"))
    assert cli.main(["run", str(p), "--out", str(d / "o")]) == 0
    return d / "o" / "run_0" / "epoch_25"


def test_reward_grid_rows(tmp_path, mural_checkpoint):
    out = tmp_path / "g.csv"
    assert cli.main(["export-reward-grid", str(mural_checkpoint), "--resolution", "50",
                     "--out", str(out)]) == 0
    rows = read_rows(out)
    assert len(rows) == 2500
    assert list(rows[0]) == ["x", "y", "reward"]
    xs = sorted({float(r["x"]) for r in rows})
    assert len(xs) == 50 and -4 < xs[0] < xs[-1] < 4


def test_mural_goal_beats_far_arm(tmp_path, mural_checkpoint):
    out = tmp_path / "g.csv"
    cli.main(["export-reward-grid", str(mural_checkpoint / "classifier.ckpt"), "--out", str(out)])
    rows = read_rows(out)
    pts = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    r = np.array([float(r["reward"]) for r in rows])
    world = maze.make_maze("zigzag")
    free = ~np.array([min(abs(p[1] + 1), abs(p[1] - 1)) < 1e-9 for p in pts])
    d = world.distance_to_goal(pts)
    ok = free & np.isfinite(d)
    goal = ok & (d <= world.goal.radius)
    far = ok & (d >= np.quantile(d[ok], 0.9))
    assert goal.sum() > 0 and far.sum() > 0
    assert r[goal].mean() > r[far].mean()


def test_tabular_empty_counts_give_half(tmp_path):
    ck = tmp_path / "t.ckpt"
    harness.save_tabular_classifier(ck, maze.TabularCounts(40))
    out = tmp_path / "g.csv"
    assert cli.main(["export-reward-grid", str(ck), "--resolution", "7", "--out", str(out)]) == 0
    assert {r["reward"] for r in read_rows(out)} == {"0.5"}


def test_missing_checkpoint_exits_1(tmp_path):
    assert cli.main(["export-reward-grid", str(tmp_path / "none"), "--out",
                     str(tmp_path / "g.csv")]) == 1
    assert cli.main(["export-visitations", str(tmp_path / "none")]) == 1


def test_export_visitations(tmp_path, mural_checkpoint):
    out = tmp_path / "v.csv"
    assert cli.main(["export-visitations", str(mural_checkpoint), "--out", str(out)]) == 0
    rows = read_rows(out)
    assert len(rows) == 40 * 40
    # 25 epochs x 1000 steps, every next-state counted once
    assert sum(int(r["visits"]) for r in rows) == 25_000


# ---------------------------------------------------------------- benchmark


def test_bench_command(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert cli.main(["bench", "--hidden", "16,16", "--dataset-size", "16", "--n-queries", "100",
                     "--n-naive", "3", "--max-steps", "300", "--out", str(out)]) == 0
    rows = {r["classifier"]: r for r in read_rows(out)}
    assert set(rows) == {"feedforward", "meta_nml", "naive_cnml"}
    lat = {k: float(v["latency_s"]) for k, v in rows.items()}
    assert all(v > 0 for v in lat.values())
    assert lat["feedforward"] <= lat["meta_nml"]
    assert int(rows["naive_cnml"]["n_queries"]) == 3
    assert "speedup" in capsys.readouterr().out


def test_convergence_command(tmp_path):
    rng = np.random.default_rng(0)
    ds = tmp_path / "d.csv"
    with open(ds, "w") as fh:
        fh.write("x0,x1,label\n")
        for i in range(8):
            c = 2.0 if i % 2 else -2.0
            fh.write(f"{c + rng.normal(0, 0.3)},{c + rng.normal(0, 0.3)},{i % 2}\n")
    out = tmp_path / "c.csv"
    assert cli.main(["convergence", str(ds), "--steps", "0,1,3", "--hidden", "8",
                     "--meta-epochs", "5", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert [int(r["steps"]) for r in rows] == [0, 1, 3]
    assert all(float(r["mean_abs_gap"]) >= 0 for r in rows)


def test_convergence_single_label_dataset_fails(tmp_path):
    ds = tmp_path / "d.csv"
    ds.write_text("x0,x1,label\n0,0,1\n1,1,1\n")
    assert cli.main(["convergence", str(ds), "--out", str(tmp_path / "c.csv")]) == 1


def test_shipped_configs_validate():
    from pathlib import Path
    shipped = sorted((Path(__file__).parent.parent / "configs").glob("*.ini"))
    assert shipped
    for p in shipped:
        assert cli.main(["validate-config", str(p)]) == 0, p
