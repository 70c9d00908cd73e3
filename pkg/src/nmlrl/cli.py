"""nmlrl command line: runs, exports, benchmarks and config checks."""

from __future__ import annotations

import argparse
import csv
import sys
import traceback
from pathlib import Path

import numpy as np

from . import bench, config, harness, maze
from .classifiers import Convergence, read_dataset

EXIT_OK, EXIT_RUNTIME, EXIT_SCHEMA = 0, 1, 2


def _err(msg):
    print(f"nmlrl: {msg}", file=sys.stderr)


def _load_config(path):
    try:
        return config.load(path)
    except FileNotFoundError:
        _err(f"config not found: {path}")
        return None
    except config.ConfigError as exc:
        key = f" (key: {exc.key})" if exc.key else ""
        _err(f"{path}: {exc}{key}")
        raise SystemExit(EXIT_SCHEMA)


def _checkpoint_file(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "classifier.ckpt"
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return p


def cmd_run(args) -> int:
    exp = _load_config(args.config)
    if exp is None:
        return EXIT_RUNTIME
    out = Path(args.out or exp.output_dir)
    layout_text = Path(exp.layout).read_text() if exp.layout else None
    log = harness.run(exp.run, out_dir=out, layout_text=layout_text)
    config.dump(exp, out / f"run_{exp.run.seed}" / "config.ini")
    last = log.rows[-1]
    print(f"{exp.run.method} on {exp.run.env}, seed {exp.run.seed}: "
          f"success {last['success_rate']:.2f}, coverage {last['coverage']:.3f} "
          f"after {len(log)} epochs -> {out / f'run_{exp.run.seed}' / 'log.csv'}")
    return EXIT_OK


def cmd_export_reward_grid(args) -> int:
    pts, r = harness.reward_grid(_checkpoint_file(args.checkpoint), args.resolution)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "reward"])
        for (x, y), v in zip(pts, r):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])
    print(f"wrote {len(r)} rows to {args.out}")
    return EXIT_OK


def cmd_export_visitations(args) -> int:
    with np.load(_checkpoint_file(args.checkpoint), allow_pickle=False) as z:
        if "counts_N" not in z:
            _err("checkpoint has no visitation counts")
            return EXIT_RUNTIME
        n = z["counts_N"]
        counts = maze.TabularCounts(int(round(np.sqrt(len(n)))), n, z["counts_G"])
    maze.export_visitations(counts, args.out)
    print(f"wrote {counts.n_side ** 2} cells to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    rep = bench.run_bench(tuple(args.hidden), args.dataset_size, args.n_queries,
                          n_naive=args.n_naive, queries_per_epoch=args.queries_per_epoch,
                          seed=args.seed, convergence=Convergence(max_steps=args.max_steps))
    rep.write_csv(args.out)
    print(rep.table())
    return EXIT_OK


def cmd_convergence(args) -> int:
    ds = read_dataset(args.dataset)
    steps, gaps, _ = bench.convergence_gaps(ds, args.steps, tuple(args.hidden),
                                            meta_epochs=args.meta_epochs, seed=args.seed)
    bench.write_gaps(args.out, steps, gaps)
    for k, g in zip(steps, gaps):
        print(f"steps={k:<3d} mean |meta - naive| = {g:.4f}")
    return EXIT_OK


def cmd_validate_config(args) -> int:
    exp = _load_config(args.config)
    if exp is None:
        return EXIT_RUNTIME
    print(f"{args.config}: ok ({exp.run.method} on {exp.run.env}, seed {exp.run.seed})")
    return EXIT_OK


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nmlrl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="train one agent from a config file")
    s.add_argument("config")
    s.add_argument("--out", help="output directory (overrides experiment.output_dir)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("export-reward-grid", help="evaluate a saved reward on a grid")
    s.add_argument("checkpoint", help="classifier.ckpt or an epoch_<n> directory")
    s.add_argument("--resolution", type=int, default=50)
    s.add_argument("--out", default="reward_grid.csv")
    s.set_defaults(func=cmd_export_reward_grid)

    s = sub.add_parser("export-visitations", help="write per-cell visit counts")
    s.add_argument("checkpoint")
    s.add_argument("--out", default="visitations.csv")
    s.set_defaults(func=cmd_export_visitations)

    s = sub.add_parser("bench", help="per-query latency of the three classifiers")
    s.add_argument("--hidden", type=_int_list, default=[64, 64])
    s.add_argument("--dataset-size", type=int, default=32)
    s.add_argument("--n-queries", type=int, default=100)
    s.add_argument("--n-naive", type=int, default=None,
                   help="queries timed for naive CNML (default: all)")
    s.add_argument("--queries-per-epoch", type=int, default=1000)
    s.add_argument("--max-steps", type=int, default=Convergence().max_steps)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="bench.csv")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("convergence", help="meta-NML vs naive CNML gap per step count")
    s.add_argument("dataset", help="CSV with x0,x1,label columns")
    s.add_argument("--steps", type=_int_list, default=[0, 1, 2, 5])
    s.add_argument("--hidden", type=_int_list, default=[64, 64])
    s.add_argument("--meta-epochs", type=int, default=bench.FIDELITY_EPOCHS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="convergence.csv")
    s.set_defaults(func=cmd_convergence)

    s = sub.add_parser("validate-config", help="check a config file against the schema")
    s.add_argument("config")
    s.set_defaults(func=cmd_validate_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code)
    except Exception as exc:  # runtime failure: report and exit 1
        _err(f"{args.command} failed: {exc}")
        traceback.print_exc(file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
