"""Assemble runs from configuration: targets, kernels, checkpoints and metrics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datasets
from .config import ConfigError, RunConfig, write_config
from .evaluate import langevin_oracle, mmd_permutation_test, moments, sliced_wasserstein
from .flow import FlowState, MetricsTrace
from .kernels import Constant, Kernel, LSkip, LSkipFullCov, LSkipHetero, Push, Skip
from .mlp import nn
from .numerics import Rng
from .sid import SidModel, read_particles, sid_sample, write_particles
from .targets import (
    BnnRegression,
    LogisticRegression,
    Shifted,
    Target,
    make_banana,
    make_bimodal,
    make_gaussian,
    make_multimodal,
    make_xshape,
)

CHECKPOINT_FILES = ("theta.csv", "particles.csv", "trace.csv", "config.resolved")


@dataclass
class Problem:
    target: Target
    test: datasets.Dataset | None = None  # held-out split for regression targets


def _load_data(t: dict) -> datasets.Dataset:
    src = t["data"]
    if not src:
        raise ConfigError(f"[target] kind={t['kind']} needs a data path")
    if src == "waveform":
        return datasets.generate_waveform(t["n_data"], Rng(t["data_seed"]).stream(0), binary=True)
    try:
        return datasets.load_csv(src, response_col=t["response_col"], header=t["header"])
    except FileNotFoundError as err:
        raise ConfigError(str(err)) from None
    except datasets.DataError as err:
        raise ConfigError(f"[target] data: {err}") from None


def build_problem(cfg: RunConfig) -> Problem:
    t = cfg.target
    kind = t["kind"]
    test = None
    if kind == "multimodal":
        target = make_multimodal()
    elif kind == "banana":
        target = make_banana()
    elif kind == "xshape":
        target = make_xshape()
    elif kind == "gaussian":
        target = make_gaussian(np.zeros(t["dim"]))
    elif kind == "bimodal":
        target = make_bimodal(t["mu"], t["dim"])
    elif kind == "logistic":
        data = _load_data(t)
        if t["standardize"]:
            data = datasets.standardize(data, responses=False)
        try:
            target = LogisticRegression(data, t["prior_precision"])
        except ValueError as err:
            raise ConfigError(f"[target] {err}") from None
    elif kind == "bnn":
        data = _load_data(t)
        counts = (t["n_train"], t["n_test"]) if t["n_train"] else None
        try:
            train, test = datasets.split(data, Rng(t["split_seed"]).stream(0), t["train_fraction"], counts)
        except datasets.DataError as err:
            raise ConfigError(f"[target] {err}") from None
        if t["standardize"]:
            try:
                train = datasets.standardize(train, responses=t["standardize_responses"])
            except datasets.DataError as err:
                raise ConfigError(f"[target] data: {err}") from None
            test = datasets.standardize(test, stats=train)
        target = BnnRegression(train, t["d_h"], noise_std=t["noise_std"], prior_var=t["prior_var"])
    else:
        raise ConfigError(f"[target] unknown kind {kind!r}")
    if t["shift"]:
        target = Shifted(target, t["shift"])
    return Problem(target, test)


def build_kernel(cfg: RunConfig, d_x: int) -> Kernel:
    k = cfg.kernel
    kind = k["kind"]
    d_z = k["d_z"] or d_x
    net = nn(d_z, k["hidden"], d_x, slope=k["slope"])
    if kind in ("constant", "skip") and d_z != d_x:
        raise ConfigError(f"[kernel] {kind} needs d_z == d_x ({d_x})")
    try:
        if kind == "constant":
            return Constant(d_x, k["c"])
        if kind == "push":
            return Push(d_z, d_x, net, k["log_sigma0"])
        if kind == "skip":
            return Skip(d_x, net, k["log_sigma0"])
        if kind == "lskip":
            return LSkip(d_z, d_x, net, k["log_sigma0"], k["w_init"])
        if kind == "lskip_fullcov":
            return LSkipFullCov(d_z, d_x, net, k["w_init"])
        if kind == "lskip_hetero":
            return LSkipHetero(d_z, d_x, k["hidden"], k["slope"], k["eps0"], k["w_init"])
    except ValueError as err:
        raise ConfigError(f"[kernel] {err}") from None
    raise ConfigError(f"[kernel] unknown kind {kind!r}")


# -- checkpoints ---------------------------------------------------------------


def write_theta(path, theta: np.ndarray) -> None:
    np.savetxt(path, np.asarray(theta).reshape(-1, 1), header="theta", comments="", fmt="%.17g", encoding="utf-8")


def read_theta(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        if fh.readline().strip() != "theta":
            raise ValueError(f"{path}: unexpected header")
        return np.array([float(line) for line in fh if line.strip()])


def save_checkpoint(run_dir, state: FlowState, trace: MetricsTrace, cfg: RunConfig) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_theta(run_dir / "theta.csv", state.theta)
    write_particles(run_dir / "particles.csv", state.Z)
    trace.to_csv(run_dir / "trace.csv")
    write_config(run_dir / "config.resolved", cfg)


def load_checkpoint(run_dir) -> tuple[np.ndarray, np.ndarray]:
    run_dir = Path(run_dir)
    missing = [f for f in CHECKPOINT_FILES if not (run_dir / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{run_dir}: incomplete checkpoint, missing {', '.join(missing)}")
    return read_theta(run_dir / "theta.csv"), read_particles(run_dir / "particles.csv")


# -- evaluation ----------------------------------------------------------------


def ground_truth(problem: Problem, cfg: RunConfig, n: int, seed: int) -> np.ndarray:
    """Exact draws for analytic targets, a MALA oracle for posteriors."""
    target = problem.target
    try:
        return target.sample(Rng(seed).stream(1), n)
    except NotImplementedError:
        pass
    e = cfg.eval
    res = langevin_oracle(target, e["oracle_h"], e["oracle_burn"], e["oracle_keep"], e["oracle_thin"],
                          e["oracle_chains"], Rng(seed).stream(2))
    return res.samples.points


def evaluate_run(model: SidModel, problem: Problem, cfg: RunConfig, seed: int | None = None) -> list[tuple]:
    """Metric rows ``(metric, value, n, seed)``."""
    e = cfg.eval
    seed = e["seed"] if seed is None else seed
    n = e["n_samples"]
    rows = []
    X = sid_sample(model, Rng(seed).stream(0), n)
    Y = ground_truth(problem, cfg, n, seed)
    rows.append(("sliced_w", sliced_wasserstein(X, Y, e["n_proj"], Rng(seed).stream(3)), n, seed))
    if problem.target.d_x <= 50:
        try:
            Y2 = problem.target.sample(Rng(seed).stream(4), n)
            rows.append(("sliced_w_floor", sliced_wasserstein(Y, Y2, e["n_proj"], Rng(seed).stream(3)), n, seed))
        except NotImplementedError:
            pass
    m = min(e["mmd_n"], len(X), len(Y))
    gen = Rng(seed).stream(5)
    Xs = X[gen.choice(len(X), m, replace=False)]
    Ys = Y[gen.choice(len(Y), m, replace=False)]
    mmd = mmd_permutation_test(Xs, Ys, e["n_perm"], e["alpha"], Rng(seed).stream(6))
    rows += [("mmd_stat", mmd.statistic, m, seed), ("mmd_p", mmd.p_value, m, seed)]
    mx, my = moments(X), moments(Y)
    rows += [
        ("mean_abs_err_max", np.abs(mx.mean - my.mean).max(), n, seed),
        ("sd_abs_err_max", np.abs(np.sqrt(np.diag(mx.cov)) - np.sqrt(np.diag(my.cov))).max(), n, seed),
    ]
    if problem.target.d_x > 1:
        iu = np.triu_indices(problem.target.d_x, 1)
        ok = mx.defined[iu] & my.defined[iu]
        rows.append(("corr_mad", np.abs(mx.corr[iu] - my.corr[iu])[ok].mean(), n, seed))
    if problem.test is not None:
        rows.append(("rmse", bnn_rmse(model, problem, e["predictive_samples"], seed), len(problem.test), seed))
    return rows


def bnn_rmse(model: SidModel, problem: Problem, n_samples: int, seed: int) -> float:
    """RMSE of the posterior-averaged predictive mean on the (standardised) test split."""
    target = problem.target
    if not isinstance(target, BnnRegression) or problem.test is None:
        raise ValueError("RMSE needs a regression target with a test split")
    W = sid_sample(model, Rng(seed).stream(7), n_samples)
    pred = target.predict(W, problem.test.features).mean(axis=0)
    return float(np.sqrt(np.mean((pred - problem.test.responses) ** 2)))

