"""Pathwise Monte Carlo estimators of the free-energy gradients.

With ``x_lm = phi_theta(Z_m, eps_l)`` and the score difference

    d_lm = s_q^gamma(x_lm) - grad log p(x_lm) [+ gamma grad q / (q + gamma)^2]

the parameter gradient is the average of ``grad_theta phi . d`` over all
(l, m) and the first-variation gradient at particle m is the average of
``grad_z phi . d`` over l. The ``E_q[grad_theta log q]`` term vanishes in
expectation and is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import Components
from .numerics import as_generator, logsumexp
from .sid import SidModel, evaluate_mixture, sid_sample
from .targets import Target


class EstimatorError(FloatingPointError):
    def __init__(self, msg: str, index: tuple[int, int] | None = None):
        super().__init__(msg)
        self.index = index


@dataclass(frozen=True)
class EstimatorConfig:
    L: int = 100
    gamma: float = 0.0
    crn: bool = True  # one eps batch shared by every particle

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be at least 1")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


def draw_noise(cfg: EstimatorConfig, rng, M: int, d_x: int) -> np.ndarray:
    gen = as_generator(rng)
    shape = (cfg.L, d_x) if cfg.crn else (cfg.L, M, d_x)
    return gen.standard_normal(shape)


def score_differences(comp: Components, target: Target, eps: np.ndarray, gamma: float = 0.0) -> np.ndarray:
    """Cotangents ``d_lm`` of shape (L, M, d_x)."""
    X = comp.sample(eps)
    L, M, d = X.shape
    flat = X.reshape(-1, d)
    ev = evaluate_mixture(comp, flat)
    if gamma > 0:
        rho, rest = ev.gamma_weights(gamma)
        s = (rho * (1.0 + rest))[:, None] * ev.score
    else:
        s = ev.score
    diff = s - target.grad_log_joint(flat)
    if not np.all(np.isfinite(diff)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(diff), axis=1))[0])
        l, m = divmod(bad, M)
        raise EstimatorError(f"non-finite score difference at sample l={l}, particle m={m}", (l, m))
    return diff.reshape(L, M, d)


def _cotangents(sid: SidModel, target, cfg, rng, eps):
    comp = sid.components()
    if eps is None:
        eps = draw_noise(cfg, rng, sid.M, sid.d_x)
    d = score_differences(comp, target, eps, cfg.gamma)
    return comp, eps, d


def estimate_grad_theta(sid: SidModel, target: Target, cfg: EstimatorConfig, lam_theta: float = 0.0,
                        rng=None, eps: np.ndarray | None = None) -> np.ndarray:
    """Monte Carlo gradient of the regularised free energy in theta (Tikhonov regulariser)."""
    comp, eps, d = _cotangents(sid, target, cfg, rng, eps)
    g, _ = sid.kernel.backward(sid.theta, sid.Z, d.sum(axis=0), comp.scale_cotangent(eps, d), want_z=False)
    g = g / (cfg.L * sid.M)
    if lam_theta:
        g = g + lam_theta * sid.theta
    return g


def first_variation_grad(sid: SidModel, target: Target, cfg: EstimatorConfig, rng=None,
                         eps: np.ndarray | None = None) -> np.ndarray:
    """Per-particle estimate of grad_z of the first variation, shape (M, d_z)."""
    comp, eps, d = _cotangents(sid, target, cfg, rng, eps)
    _, gz = sid.kernel.backward(sid.theta, sid.Z, d.sum(axis=0), comp.scale_cotangent(eps, d), want_theta=False)
    return gz / cfg.L


def reference_precision(p0_cov, d_z: int) -> np.ndarray:
    """Precision matrix of the centred Gaussian reference N(0, p0_cov)."""
    c = np.asarray(p0_cov, dtype=float)
    if c.ndim == 0:
        c = np.full(d_z, float(c))
    if c.ndim == 1:
        if np.any(c <= 0):
            raise ValueError("reference covariance must be positive definite")
        return np.diag(1.0 / c)
    np.linalg.cholesky(c)  # raises if not PD
    return np.linalg.inv(c)


def drift_from_fv(fv_grad: np.ndarray, Z: np.ndarray, lam_r: float, p0_precision: np.ndarray) -> np.ndarray:
    return -fv_grad - lam_r * Z @ p0_precision.T


def estimate_drift(sid: SidModel, target: Target, cfg: EstimatorConfig, lam_r: float, p0_cov=1.0,
                   rng=None, eps: np.ndarray | None = None) -> np.ndarray:
    """Particle drift ``-grad_z dE/dr + lam_r grad log p0``, shape (M, d_z)."""
    fv = first_variation_grad(sid, target, cfg, rng, eps)
    return drift_from_fv(fv, sid.Z, lam_r, reference_precision(p0_cov, sid.kernel.d_z))


def free_energy_samples(sid: SidModel, target: Target, n: int, gamma: float = 0.0, rng=None) -> np.ndarray:
    x = sid_sample(sid, rng, n)
    log_q = logsumexp(sid.components().pairwise_log_density(x), axis=1) - np.log(sid.M)
    if gamma > 0:
        log_q = np.logaddexp(log_q, np.log(gamma))
    return log_q - target.log_joint(x)


def estimate_free_energy(sid: SidModel, target: Target, n: int = 512, gamma: float = 0.0, rng=None) -> float:
    """Sample mean of ``log(q + gamma) - log p~`` under q (no KL(r, p0) term)."""
    if n < 1:
        raise ValueError("need at least one sample")
    return float(free_energy_samples(sid, target, n, gamma, rng).mean())
