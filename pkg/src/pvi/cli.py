"""Command-line entry point: ``pvi run | eval | gradcheck | bnn``.

Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
3 divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .evaluate import write_metrics
from .experiment import (
    Problem,
    bnn_rmse,
    build_kernel,
    build_problem,
    evaluate_run,
    load_checkpoint,
    save_checkpoint,
)
from .flow import DivergenceError, MetricsTrace, run
from .gradcheck import format_report, run_suite
from .sid import SidModel

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("pvi")


class RunLocked(RuntimeError):
    pass


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive lock file so two processes never write one run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{run_dir} is in use (remove {lock} if no run is active)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _prepare(args) -> tuple[RunConfig, Problem, object, Path]:
    """Load and validate everything before touching the output directory."""
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.pvi["seed"] = args.seed
    if args.deterministic:
        cfg.experiment["deterministic"] = True
    out = args.out or cfg.experiment["out"]
    if not out:
        raise ConfigError("no output directory: pass --out or set [experiment] out")
    cfg.experiment["out"] = str(out)
    problem = build_problem(cfg)
    kernel = build_kernel(cfg, problem.target.d_x)
    cfg.pvi_config()
    return cfg, problem, kernel, Path(out)


def _train(cfg: RunConfig, problem: Problem, kernel, out: Path):
    pcfg = cfg.pvi_config()
    try:
        # divergence is detected by finiteness checks, so numpy's warnings add nothing
        with np.errstate(all="ignore"):
            state, trace = run(pcfg, kernel, problem.target)
    except DivergenceError as err:
        if err.state is not None:
            save_checkpoint(out, err.state, err.trace or MetricsTrace(), cfg)
        log.error("diverged: %s (last finite state saved to %s)", err, out)
        return None
    if cfg.experiment["deterministic"]:
        for r in trace.records:
            r.wall_ms = 0.0
    save_checkpoint(out, state, trace, cfg)
    return state


def cmd_run(args) -> int:
    cfg, problem, kernel, out = _prepare(args)
    with run_lock(out):
        state = _train(cfg, problem, kernel, out)
    if state is None:
        return EXIT_DIVERGED
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        theta, Z = load_checkpoint(run_dir)
    except (FileNotFoundError, ValueError) as err:
        raise ConfigError(str(err)) from None
    cfg = load_config(args.config or run_dir / "config.resolved")
    if args.seed is not None:
        cfg.eval["seed"] = args.seed
    problem = build_problem(cfg)
    kernel = build_kernel(cfg, problem.target.d_x)
    try:
        model = SidModel(kernel, theta, Z)
    except ValueError as err:
        raise ConfigError(f"checkpoint does not match the config: {err}") from None
    out = Path(args.out) if args.out else run_dir
    rows = evaluate_run(model, problem, cfg)
    with run_lock(out):
        write_metrics(out / "metrics.csv", rows)
    for metric, value, *_ in rows:
        print(f"{metric},{value:.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.config:
        seed = load_config(args.config).pvi["seed"] if args.seed is None else seed
    results = run_suite(seed, inject_fault=args.inject_fault)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_bnn(args) -> int:
    cfg, problem, kernel, out = _prepare(args)
    if problem.test is None:
        raise ConfigError("[target] kind must be bnn for the bnn command")
    with run_lock(out):
        state = _train(cfg, problem, kernel, out)
        if state is None:
            return EXIT_DIVERGED
        seed = cfg.eval["seed"]
        rmse = bnn_rmse(SidModel(kernel, state.theta, state.Z), problem, cfg.eval["predictive_samples"], seed)
        write_metrics(out / "metrics.csv", [("rmse", rmse, len(problem.test), seed)])
    print(f"rmse,{rmse:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pvi", description="Particle variational inference experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment config file")
        sp.add_argument("--seed", type=int, help="override the seed")
        sp.add_argument("--deterministic", action="store_true", help="byte-identical outputs (zeroes wall times)")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("run", help="train and write a checkpoint directory")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("eval", help="compare a trained run against ground truth")
    common(sp, config_required=False)
    sp.add_argument("--run-dir", required=True, help="checkpoint directory written by 'run'")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference derivative suite")
    common(sp, config_required=False)
    sp.add_argument("--inject-fault", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("bnn", help="train on a regression posterior and report test RMSE")
    common(sp)
    sp.set_defaults(func=cmd_bnn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, RunLocked) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
