"""Time-discretised particle flow: alternating parameter and particle updates."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .estimators import (
    EstimatorConfig,
    draw_noise,
    drift_from_fv,
    estimate_free_energy,
    estimate_grad_theta,
    first_variation_grad,
    reference_precision,
)
from .kernels import Kernel
from .numerics import Rng
from .sid import SidModel
from .targets import Target

log = logging.getLogger(__name__)

# stream keys under the run seed
_INIT, _STEP, _LOG = 0, 1, 2


class DivergenceError(FloatingPointError):
    """Non-finite state after an iteration. ``state`` is the last finite state."""

    def __init__(self, msg: str, iteration: int, state: "FlowState | None" = None, trace=None):
        super().__init__(msg)
        self.iteration = iteration
        self.state = state
        self.trace = trace


@dataclass
class PviConfig:
    K: int = 1000
    M: int = 100
    L: int = 100
    h_theta: float = 1e-4
    h_r: float = 1e-2
    lam_r: float = 1e-8
    lam_theta: float = 0.0
    gamma: float = 0.0
    seed: int = 0
    theta_precond: str = "rmsprop"  # identity | rmsprop
    r_precond: str = "identity"  # identity | rmsprop
    beta: float = 0.9
    precond_eps: float = 1e-8
    r_beta: float = 0.9
    r_precond_eps: float = 1e-8
    r_aggregate: str = "mean"  # mean | max
    p0_cov: float = 1.0
    noise: str = "alg1"  # alg1: sqrt(lam_r h_r Psi); em2: sqrt(2 lam_r h_r Psi)
    crn: bool = True
    h_theta_final: float | None = None  # piecewise-constant decay target
    h_theta_every: int = 100
    h_theta_factor: float | None = None
    log_every: int = 50
    fe_samples: int = 512
    init_scale: float = 1.0

    def __post_init__(self):
        if self.K < 0 or self.M < 1 or self.L < 1:
            raise ValueError("need K >= 0, M >= 1 and L >= 1")
        if self.h_theta < 0 or self.h_r < 0:
            raise ValueError("step sizes must be non-negative")
        if self.lam_r < 0 or self.lam_theta < 0 or self.gamma < 0:
            raise ValueError("regularisation weights and gamma must be non-negative")
        for b in (self.beta, self.r_beta):
            if not 0.0 < b < 1.0:
                raise ValueError("RMSProp decay must lie in (0, 1)")
        if self.theta_precond not in ("identity", "rmsprop"):
            raise ValueError(f"unknown theta preconditioner {self.theta_precond!r}")
        if self.r_precond not in ("identity", "rmsprop"):
            raise ValueError(f"unknown particle preconditioner {self.r_precond!r}")
        if self.r_aggregate not in ("mean", "max"):
            raise ValueError(f"unknown aggregate {self.r_aggregate!r}")
        if self.noise not in ("alg1", "em2"):
            raise ValueError(f"unknown noise convention {self.noise!r}")
        if self.log_every < 1:
            raise ValueError("log_every must be positive")

    @property
    def estimator(self) -> EstimatorConfig:
        return EstimatorConfig(L=self.L, gamma=self.gamma, crn=self.crn)

    def theta_step(self, k: int) -> float:
        """Parameter step size at (1-based) iteration ``k``.

        With ``h_theta_final`` set the step is piecewise constant over blocks
        of ``h_theta_every`` iterations, shrinking geometrically so that the
        last block of the run uses ``h_theta_final`` (or by
        ``h_theta_factor`` per block when that is given).
        """
        if self.h_theta_final is None or self.h_theta == 0:
            return self.h_theta
        block = (k - 1) // self.h_theta_every
        if self.h_theta_factor is not None:
            factor = self.h_theta_factor
        else:
            n_blocks = max(-(-self.K // self.h_theta_every), 2)
            factor = (self.h_theta_final / self.h_theta) ** (1.0 / (n_blocks - 1))
        step = self.h_theta * factor**block
        return max(step, self.h_theta_final) if factor < 1 else min(step, self.h_theta_final)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FlowState:
    theta: np.ndarray
    Z: np.ndarray
    v_theta: np.ndarray
    B: np.ndarray
    iteration: int = 0
    seed: int = 0

    def copy(self) -> "FlowState":
        return replace(self, theta=self.theta.copy(), Z=self.Z.copy(), v_theta=self.v_theta.copy(), B=self.B.copy())

    def sid(self, kernel: Kernel) -> SidModel:
        return SidModel(kernel, self.theta, self.Z)


@dataclass
class TraceRecord:
    iter: int
    elbo_est: float
    grad_theta_norm: float
    drift_norm_mean: float
    wall_ms: float


@dataclass
class MetricsTrace:
    records: list[TraceRecord] = field(default_factory=list)

    FIELDS = ("iter", "elbo_est", "grad_theta_norm", "drift_norm_mean", "wall_ms")

    def append(self, rec: TraceRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.FIELDS) + "\n")
            for r in self.records:
                fh.write(f"{r.iter},{r.elbo_est:.17g},{r.grad_theta_norm:.17g},"
                         f"{r.drift_norm_mean:.17g},{r.wall_ms:.3f}\n")


def rmsprop_theta(v: np.ndarray, g: np.ndarray, beta: float, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Moving average of squared gradients; returns ``(v', diag(Psi))``."""
    v = beta * v + (1.0 - beta) * g * g
    return v, 1.0 / (np.sqrt(v) + eps)


def rmsprop_r(B: np.ndarray, grads: np.ndarray, beta: float, eps: float,
              aggregate: str = "mean") -> tuple[np.ndarray, np.ndarray]:
    """Particle preconditioner shared by the whole cloud.

    Squared per-particle gradients are aggregated per coordinate (mean or
    max) and folded into the moving average ``B``; ``Psi = (B + eps)^-1/2``.
    """
    sq = np.asarray(grads) ** 2
    if aggregate == "mean":
        agg = sq.mean(axis=0)
    elif aggregate == "max":
        agg = sq.max(axis=0)
    else:
        raise ValueError(f"unknown aggregate {aggregate!r}")
    B = beta * B + (1.0 - beta) * agg
    return B, 1.0 / np.sqrt(B + eps)


def pvi_init(config: PviConfig, kernel: Kernel, target: Target | None = None, rng: Rng | None = None) -> FlowState:
    if target is not None and target.d_x != kernel.d_x:
        raise ValueError(f"kernel produces d_x={kernel.d_x} but target has d_x={target.d_x}")
    rng = rng or Rng(config.seed)
    gen = rng.stream(_INIT)
    theta = kernel.init(gen)
    Z = config.init_scale * gen.standard_normal((config.M, kernel.d_z))
    return FlowState(theta, Z, np.zeros_like(theta), np.zeros(kernel.d_z), 0, rng.seed)


@dataclass
class StepInfo:
    grad_theta_norm: float
    drift_norm_mean: float


def pvi_step(state: FlowState, kernel: Kernel, target: Target, config: PviConfig,
             info: list | None = None) -> FlowState:
    """One iteration; returns a new state and leaves ``state`` untouched."""
    k = state.iteration + 1
    gen = Rng(state.seed).stream(_STEP, k)
    cfg = config.estimator
    eps = draw_noise(cfg, gen, config.M, kernel.d_x)
    eta = gen.standard_normal(state.Z.shape)

    new = state.copy()
    new.iteration = k

    if kernel.n_params:
        g = estimate_grad_theta(SidModel(kernel, state.theta, state.Z), target, cfg, config.lam_theta, eps=eps)
    else:
        g = np.zeros(0)
    h = config.theta_step(k)
    if config.theta_precond == "rmsprop":
        with np.errstate(over="ignore"):
            new.v_theta, psi = rmsprop_theta(state.v_theta, g, config.beta, config.precond_eps)
        if not np.all(np.isfinite(new.v_theta)):
            raise DivergenceError(f"parameter gradient overflow at iteration {k}", k, state)
        assert np.all(psi > 0), "theta preconditioner lost positivity"
        new.theta = state.theta - h * psi * g
    else:
        new.theta = state.theta - h * g
    if not np.all(np.isfinite(new.theta)):
        raise DivergenceError(f"non-finite kernel parameters at iteration {k}", k, state)

    drift_norm = 0.0
    if config.h_r > 0:
        # the particle drift uses the freshly updated parameters
        fv = first_variation_grad(SidModel(kernel, new.theta, state.Z), target, cfg, eps=eps)
        drift = drift_from_fv(fv, state.Z, config.lam_r, reference_precision(config.p0_cov, kernel.d_z))
        if config.r_precond == "rmsprop":
            with np.errstate(over="ignore"):
                new.B, psi_r = rmsprop_r(state.B, fv, config.r_beta, config.r_precond_eps, config.r_aggregate)
            if not np.all(np.isfinite(new.B)):
                raise DivergenceError(f"particle gradient overflow at iteration {k}", k, state)
        else:
            psi_r = np.ones(kernel.d_z)
        assert np.all(psi_r > 0), "particle preconditioner lost positivity"
        scale = config.lam_r * config.h_r * (2.0 if config.noise == "em2" else 1.0)
        new.Z = state.Z + config.h_r * psi_r * drift + np.sqrt(scale * psi_r) * eta
        if not np.all(np.isfinite(new.Z)):
            raise DivergenceError(f"non-finite particles at iteration {k}", k, state)
        drift_norm = float(np.linalg.norm(drift, axis=1).mean())
    if info is not None:
        info.append(StepInfo(float(np.linalg.norm(g)), drift_norm))
    return new


def log_record(state: FlowState, kernel: Kernel, target: Target, config: PviConfig, step: StepInfo | None,
               t0: float) -> TraceRecord:
    gen = Rng(state.seed).stream(_LOG, state.iteration)
    fe = estimate_free_energy(state.sid(kernel), target, config.fe_samples, config.gamma, gen)
    return TraceRecord(
        state.iteration,
        fe,
        step.grad_theta_norm if step else float("nan"),
        step.drift_norm_mean if step else float("nan"),
        1000.0 * (time.perf_counter() - t0),
    )


def run(config: PviConfig, kernel: Kernel, target: Target, state: FlowState | None = None,
        log_every: int | None = None, callback=None) -> tuple[FlowState, MetricsTrace]:
    """Run ``config.K`` iterations from ``state`` (or a fresh initialisation)."""
    state = state if state is not None else pvi_init(config, kernel, target)
    every = log_every or config.log_every
    trace = MetricsTrace()
    t0 = time.perf_counter()
    info: list[StepInfo] = []
    for _ in range(config.K):
        try:
            nxt = pvi_step(state, kernel, target, config, info)
        except DivergenceError as err:
            err.trace = trace
            raise
        except FloatingPointError as err:
            raise DivergenceError(f"iteration {state.iteration + 1}: {err}", state.iteration + 1, state, trace) from err
        state = nxt
        if state.iteration % every == 0 or state.iteration == config.K:
            trace.append(log_record(state, kernel, target, config, info[-1], t0))
            if callback is not None:
                callback(state, trace)
            log.debug("iter %d free energy %.4f", state.iteration, trace.records[-1].elbo_est)
        info.clear()
    return state, trace
