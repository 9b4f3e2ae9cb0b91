"""The particle mixture ``q(x) = (1/M) sum_m k_theta(x | Z_m)``."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernels import Components, Kernel
from .numerics import as_generator, logsumexp


@dataclass
class SidModel:
    kernel: Kernel
    theta: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        if self.Z.shape[1] != self.kernel.d_z:
            raise ValueError(f"cloud has d_z={self.Z.shape[1]}, kernel expects {self.kernel.d_z}")
        if not np.all(np.isfinite(self.Z)):
            raise ValueError("particle cloud contains non-finite entries")

    @property
    def M(self) -> int:
        return self.Z.shape[0]

    @property
    def d_x(self) -> int:
        return self.kernel.d_x

    def components(self) -> Components:
        return self.kernel.components(self.theta, self.Z)


@dataclass
class MixtureEval:
    """log q and its score at a batch of points."""

    log_q: np.ndarray  # (N,)
    score: np.ndarray  # (N, d)

    def gamma_weights(self, gamma: float) -> tuple[np.ndarray, np.ndarray]:
        """``q/(q+gamma)`` and ``gamma/(q+gamma)``, evaluated in log space."""
        if gamma < 0:
            raise ValueError("gamma must be non-negative")
        if gamma == 0:
            return np.ones_like(self.log_q), np.zeros_like(self.log_q)
        lg = np.log(gamma)
        denom = np.logaddexp(self.log_q, lg)
        return np.exp(self.log_q - denom), np.exp(lg - denom)

    def score_gamma(self, gamma: float) -> np.ndarray:
        rho, _ = self.gamma_weights(gamma)
        return rho[:, None] * self.score

    def correction(self, gamma: float) -> np.ndarray:
        """``gamma * grad q / (q + gamma)^2``."""
        rho, rest = self.gamma_weights(gamma)
        return (rho * rest)[:, None] * self.score


def evaluate_mixture(comp: Components, x: np.ndarray, chunk: int = 2048) -> MixtureEval:
    """Shifted-softmax evaluation of the mixture log-density and score.

    Rows are processed in blocks so the (rows, M) work arrays stay in cache.
    """
    X = np.atleast_2d(x)
    log_q = np.empty(len(X))
    score = np.empty_like(X, dtype=float)
    for s in range(0, len(X), chunk):
        Xc = X[s : s + chunk]
        w, offset = comp.pairwise_logits(Xc)
        top = w.max(axis=1)
        w -= top[:, None]
        np.exp(w, out=w)
        total = w.sum(axis=1)
        log_q[s : s + chunk] = np.log(total) + top + offset
        score[s : s + chunk] = comp.weighted_grad_x(Xc, w, total)
    return MixtureEval(log_q - np.log(len(comp)), score)


def _points(model: SidModel, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.d_x:
        raise ValueError(f"point has dimension {x.shape[-1]}, expected {model.d_x}")
    return np.atleast_2d(x), x.ndim == 1


def sid_log_density(model: SidModel, x):
    X, single = _points(model, x)
    comp = model.components()
    out = logsumexp(comp.pairwise_log_density(X), axis=1) - np.log(model.M)
    return float(out[0]) if single else out


def sid_score(model: SidModel, x) -> np.ndarray:
    X, single = _points(model, x)
    s = evaluate_mixture(model.components(), X).score
    return s[0] if single else s


def sid_score_gamma(model: SidModel, x, gamma: float) -> np.ndarray:
    """grad_x log(q(x) + gamma); reduces to :func:`sid_score` at gamma = 0."""
    X, single = _points(model, x)
    s = evaluate_mixture(model.components(), X).score_gamma(gamma)
    return s[0] if single else s


def sid_gamma_correction(model: SidModel, x, gamma: float) -> np.ndarray:
    X, single = _points(model, x)
    s = evaluate_mixture(model.components(), X).correction(gamma)
    return s[0] if single else s


def sid_grad_density(model: SidModel, x) -> np.ndarray:
    """grad_x q(x) itself (not the log)."""
    X, single = _points(model, x)
    ev = evaluate_mixture(model.components(), X)
    g = np.exp(ev.log_q)[:, None] * ev.score
    return g[0] if single else g


def sid_sample(model: SidModel, rng, n: int, return_index: bool = False):
    """Hierarchical draws: a uniformly chosen particle, then the kernel."""
    if n < 1:
        raise ValueError("need at least one sample")
    gen = as_generator(rng)
    idx = gen.integers(0, model.M, size=n)
    eps = gen.standard_normal((n, model.d_x))
    comp = model.components().take(idx)
    x = comp.sample(eps[None])[0]
    return (x, idx) if return_index else x


def write_particles(path, Z: np.ndarray) -> None:
    Z = np.atleast_2d(Z)
    header = ",".join(f"z_{i + 1}" for i in range(Z.shape[1]))
    np.savetxt(path, Z, delimiter=",", header=header, comments="", fmt="%.17g", encoding="utf-8")


def read_particles(path) -> np.ndarray:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if not all(h == f"z_{i + 1}" for i, h in enumerate(header)):
        raise ValueError(f"{path}: unexpected particle header {header}")
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2))
