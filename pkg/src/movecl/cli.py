"""Command-line front end: run scenarios, evaluate checkpoints, selftest.

Verbs:
  run       execute a configured task stream per seed; writes summary.txt,
            accuracy_matrix.csv, train_log.csv, model.ckpt, and figures
            into one directory per seed
  eval      recompute a checkpoint's final accuracy row and verify it
            matches the row recorded at save time
  selftest  run the oracle suite (KL vs Monte Carlo, W2 vs quadrature,
            PSD kernels, gradient checks, routing/snapshot invariants)
  report    re-render figures from a run directory's delimited files

Exit codes: 0 success, 1 check/verification failure, 2 configuration
error, 3 data error, 4 numeric divergence, 5 checkpoint error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NumericError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_echo, load_run_config
from .data import (
    DataError,
    TaskStream,
    load_mnist,
    make_permuted_tasks,
    make_split_tasks,
    make_synthetic_stream,
)
from .figures import render_run_dir
from .harness import RunResult, evaluate_row, run_continual
from .selftest import run_selftest

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5


def build_stream(rc: RunConfig, seed: int) -> TaskStream:
    """Construct the scenario's task stream for one run seed."""
    if rc.scenario == "synthetic":
        return make_synthetic_stream(rc.synthetic_tasks, rc.synthetic_per_task,
                                     rc.synthetic_separation, seed)
    train, test = load_mnist(rc.data_dir)
    if rc.scenario == "split_mnist":
        return make_split_tasks(train, test, rc.split_pairs)
    return make_permuted_tasks(train, test, rc.permuted_tasks, seed)


def _fmt(x) -> str:
    return repr(float(x))


def write_summary(path: Path, echo: dict[str, str], seed: int,
                  result: RunResult) -> None:
    acc, forgetting = result.metrics()
    lines = [f"movecl.version = {__version__}"]
    lines += [f"config.{key} = {value}" for key, value in echo.items()]
    lines.append(f"run.seed = {seed}")
    lines.append(f"metric.acc = {_fmt(acc)}")
    lines.append(f"metric.forgetting = {_fmt(forgetting)}")
    for j, value in enumerate(result.matrix.final_row()):
        lines.append(f"metric.final_task_{j} = {_fmt(value)}")
    path.write_text("\n".join(lines) + "\n")


def _echo_header(echo: dict[str, str]) -> str:
    return "".join(f"# {key} = {value}\n" for key, value in echo.items())


def write_matrix_csv(path: Path, echo: dict[str, str], result: RunResult) -> None:
    grid = result.matrix.grid
    n = grid.shape[0]
    rows = [_echo_header(echo)]
    rows.append("stage," + ",".join(f"task_{j}" for j in range(n)) + "\n")
    for t in range(n):
        cells = [_fmt(grid[t, j]) if j <= t else "" for j in range(n)]
        rows.append(f"{t}," + ",".join(cells) + "\n")
    path.write_text("".join(rows))


def write_train_log(path: Path, echo: dict[str, str], result: RunResult) -> None:
    rows = [_echo_header(echo)]
    if result.records:
        keys = list(result.records[0].keys())
        rows.append(",".join(keys) + "\n")
        for record in result.records:
            cells = [str(record[k]) if k in ("task", "epoch") else _fmt(record[k])
                     for k in keys]
            rows.append(",".join(cells) + "\n")
    path.write_text("".join(rows))


def run_one_seed(rc: RunConfig, seed: int, out_dir: Path) -> tuple[float, float]:
    seed_dir = out_dir / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)

    cfg = dataclasses.replace(rc.train, seed=seed)
    stream = build_stream(rc, seed)
    result = run_continual(stream, rc.layer_sizes(), cfg,
                           n_experts=rc.n_experts, k=rc.k)

    echo = config_echo(rc)
    echo["seeds"] = str(seed)  # this artifact reconstructs exactly this run
    write_summary(seed_dir / "summary.txt", echo, seed, result)
    write_matrix_csv(seed_dir / "accuracy_matrix.csv", echo, result)
    write_train_log(seed_dir / "train_log.csv", echo, result)
    save_checkpoint(seed_dir / "model.ckpt", result.model, echo,
                    final_row=result.matrix.final_row())
    if rc.render_figures:
        render_run_dir(seed_dir)
    return result.metrics()


def cmd_run(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seeds={args.seed}")
    if args.out is not None:
        overrides.append(f"out.dir={args.out}")
    if args.data_dir is not None:
        overrides.append(f"data.dir={args.data_dir}")
    if args.no_figures:
        overrides.append("report.figures=false")
    rc = load_run_config(args.config, overrides)

    out_dir = Path(rc.out_dir)
    accs = []
    for seed in rc.seeds:
        acc, forgetting = run_one_seed(rc, seed, out_dir)
        accs.append(acc)
        print(f"seed {seed}: acc={acc:.4f} forgetting={forgetting:.4f} "
              f"-> {out_dir / f'seed_{seed}'}")
    if len(accs) > 1:
        print(f"mean acc over {len(accs)} seeds: {np.mean(accs):.4f} "
              f"(+/- {np.std(accs):.4f})")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, echo, stored_row = load_checkpoint(args.checkpoint)
    from .config import build_run_config

    rc = build_run_config(echo)
    if args.data_dir is not None:
        rc.data_dir = args.data_dir
    seed = rc.seeds[0]
    stream = build_stream(rc, seed)
    row = evaluate_row(model, stream, len(stream) - 1)
    print("recomputed final row: " + ",".join(_fmt(v) for v in row))
    if stored_row.size and not np.array_equal(row, stored_row):
        print("MISMATCH against row recorded at save time: "
              + ",".join(_fmt(v) for v in stored_row), file=sys.stderr)
        return EXIT_FAILED
    print("matches the row recorded at save time")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_selftest(args.seed)
    for result in results:
        print(result.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed: "
              + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_FAILED
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"run directory not found: {run_dir}")
    written = render_run_dir(run_dir)
    if not written:
        raise DataError(f"{run_dir}: no delimited run outputs to render")
    for path in written:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="movecl",
        description="Mixture-of-variational-experts continual learning")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train a configured task stream")
    run.add_argument("--config", help="path to a key=value config file")
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config key (repeatable)")
    run.add_argument("--seed", help="comma-separated seed list override")
    run.add_argument("--out", help="output directory override")
    run.add_argument("--data-dir", help="IDX dataset directory override")
    run.add_argument("--no-figures", action="store_true",
                     help="skip figure rendering")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="re-evaluate a saved checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data-dir", help="IDX dataset directory override")
    ev.set_defaults(func=cmd_eval)

    st = sub.add_parser("selftest", help="run the oracle/property suite")
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(func=cmd_selftest)

    rp = sub.add_parser("report", help="render figures from a run directory")
    rp.add_argument("run_dir")
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
