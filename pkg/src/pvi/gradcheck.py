"""Finite-difference checks of every hand-written derivative.

Each check returns the maximum relative error between an analytic product
and central differences; the suite passes when all stay below ``TOL``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import mlp
from .datasets import Dataset, generate_waveform
from .estimators import EstimatorConfig, estimate_grad_theta
from .kernels import (
    Constant,
    Kernel,
    LSkip,
    LSkipFullCov,
    LSkipHetero,
    Push,
    Skip,
    kernel_grad_x_log_density,
    kernel_log_density,
    kernel_sample,
    kernel_vjp_theta,
    kernel_vjp_z,
)
from .mlp import MlpSpec, nn
from .numerics import Rng, sym_matrix_exp, sym_matrix_exp_vjp
from .sid import SidModel, sid_log_density, sid_score, sid_score_gamma
from .targets import BnnRegression, LogisticRegression, make_banana, make_bimodal, make_multimodal, make_xshape

TOL = 1e-5
STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.linalg.norm(a), 1e-12))


def fd_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def _perturbed(kernel: Kernel, gen) -> np.ndarray:
    """Initial parameters plus noise so no block sits at a special value."""
    return kernel.init(gen) + 0.3 * gen.standard_normal(kernel.n_params)


class _Faulty:
    """Wraps a kernel and corrupts its parameter VJP (negative control)."""

    def __init__(self, kernel: Kernel):
        self._k = kernel

    def __getattr__(self, name):
        return getattr(self._k, name)

    def backward(self, theta, Z, cot_mean, cot_scale, **kw):
        g, gz = self._k.backward(theta, Z, cot_mean, cot_scale, **kw)
        if g is not None:
            g = g * 1.01
        if gz is not None:
            gz = gz * 1.01
        return g, gz


def kernel_zoo(gen) -> dict[str, Kernel]:
    return {
        "constant": Constant(2, 0.7),
        "push": Push(3, 2, nn(3, 8, 2)),
        "skip": Skip(2, nn(2, 8, 2)),
        "lskip": LSkip(3, 2, nn(3, 8, 2)),
        "lskip_hetero": LSkipHetero(3, 2, 8),
        "lskip_fullcov": LSkipFullCov(2, 3, nn(2, 8, 3)),
    }


def _kernel_checks(name: str, kernel, gen) -> list[CheckResult]:
    theta = _perturbed(kernel, gen)
    z = gen.standard_normal(kernel.d_z)
    eps = gen.standard_normal(kernel.d_x)
    v = gen.standard_normal(kernel.d_x)
    out = []
    if kernel.n_params:
        fd = fd_grad(lambda t: kernel_sample(kernel, t, z, eps) @ v, theta)
        out.append(CheckResult(f"kernel_vjp_theta[{name}]", rel_err(kernel_vjp_theta(kernel, theta, z, eps, v), fd), TOL))
    fd = fd_grad(lambda zz: kernel_sample(kernel, theta, zz, eps) @ v, z)
    out.append(CheckResult(f"kernel_vjp_z[{name}]", rel_err(kernel_vjp_z(kernel, theta, z, eps, v), fd), TOL))
    x = kernel_sample(kernel, theta, z, eps) + 0.3 * gen.standard_normal(kernel.d_x)
    fd = fd_grad(lambda xx: kernel_log_density(kernel, theta, xx, z), x)
    out.append(CheckResult(f"kernel_grad_x[{name}]", rel_err(kernel_grad_x_log_density(kernel, theta, x, z), fd), TOL))
    return out


def _mlp_checks(gen) -> list[CheckResult]:
    out = []
    for spec, label in [(nn(3, 6, 2), "leaky_relu"), (MlpSpec((3, 5, 2), activation="relu", output="softplus"), "softplus")]:
        p = mlp.init_params(spec, gen) + 0.1 * gen.standard_normal(spec.n_params)
        X = gen.standard_normal((4, 3))
        C = gen.standard_normal((4, 2))
        gp, gx = mlp.vjp(spec, p, X, C, want_params=True, want_input=True)
        fd_p = fd_grad(lambda q: float((mlp.forward(spec, q, X) * C).sum()), p)
        fd_x = fd_grad(lambda y: float((mlp.forward(spec, p, y) * C).sum()), X)
        out.append(CheckResult(f"mlp_vjp_params[{label}]", rel_err(gp, fd_p), TOL))
        out.append(CheckResult(f"mlp_vjp_input[{label}]", rel_err(gx, fd_x), TOL))
    return out


def _matrix_exp_check(gen) -> CheckResult:
    A = 0.5 * gen.standard_normal((3, 3))
    G = gen.standard_normal((3, 3))
    fd = fd_grad(lambda S: float((sym_matrix_exp(S) * G).sum()), A)
    return CheckResult("sym_matrix_exp_vjp", rel_err(sym_matrix_exp_vjp(A, G), fd), TOL)


def _sid_checks(gen) -> list[CheckResult]:
    k = LSkip(2, 2, nn(2, 6, 2))
    model = SidModel(k, _perturbed(k, gen), gen.standard_normal((5, 2)))
    x = gen.standard_normal(2)
    fd = fd_grad(lambda y: sid_log_density(model, y), x)
    res = [CheckResult("sid_score", rel_err(sid_score(model, x), fd), TOL)]
    gamma = 0.05
    fd = fd_grad(lambda y: float(np.log(np.exp(sid_log_density(model, y)) + gamma)), x)
    res.append(CheckResult("sid_score_gamma", rel_err(sid_score_gamma(model, x, gamma), fd), TOL))
    return res


def _target_checks(gen) -> list[CheckResult]:
    wave = generate_waveform(40, gen)
    O = gen.standard_normal((12, 3))
    bnn_data = Dataset(O, np.sin(O[:, 0]) + 0.1 * gen.standard_normal(12))
    targets = {
        "banana": (make_banana(), 1.0),
        "xshape": (make_xshape(), 1.0),
        "multimodal": (make_multimodal(), 1.0),
        "bimodal": (make_bimodal(2.0), 1.0),
        "logistic": (LogisticRegression(wave), 0.1),
        "bnn": (BnnRegression(bnn_data, 4, noise_std=0.5), 0.5),
    }
    out = []
    for name, (t, scale) in targets.items():
        x = scale * gen.standard_normal(t.d_x)
        fd = fd_grad(t.log_joint, x)
        out.append(CheckResult(f"target_grad[{name}]", rel_err(t.grad_log_joint(x), fd), TOL))
    return out


def push_bias_check(b: float, n_rep: int = 200, L: int = 50, seed: int = 0) -> CheckResult:
    """Push kernel reduced to a bias on a standard-normal target.

    With ``f(z) = b`` and unit scale, q = N(b, I) and the free-energy
    gradient in ``b`` is ``b``; the estimator mean must sit within 4 SE.
    """
    d = 2
    spec = MlpSpec((d, d))
    k = Push(d, d, spec)
    theta = np.zeros(k.n_params)
    bias = slice(d * d, d * d + d)
    theta[bias] = b
    target = make_bimodal(0.0, d)  # N(0, I)
    model = SidModel(k, theta, np.zeros((1, d)))
    cfg = EstimatorConfig(L=L)
    root = Rng(seed)
    G = np.array([estimate_grad_theta(model, target, cfg, rng=root.stream(r))[bias] for r in range(n_rep)])
    mean = G.mean(axis=0)
    se = G.std(axis=0, ddof=1) / np.sqrt(n_rep)
    z = np.abs(mean - b) / np.maximum(4.0 * se, 1e-12)
    # scaled so that passing means |mean - b| < 4 SE (with a rounding floor)
    return CheckResult(f"push_bias_estimator[b={b:g}]", float(z.max()), 1.0, f"mean={mean.round(6).tolist()}")


def run_suite(seed: int = 0, inject_fault: str | None = None) -> list[CheckResult]:
    gen = Rng(seed).stream(0)
    results = _mlp_checks(gen)
    results.append(_matrix_exp_check(gen))
    for name, kernel in kernel_zoo(gen).items():
        if inject_fault == name:
            kernel = _Faulty(kernel)
        results += _kernel_checks(name, kernel, gen)
    results += _sid_checks(gen)
    results += _target_checks(gen)
    for b in (0.5, 1.0, 2.0):
        results.append(push_bias_check(b, seed=seed))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'check':<36} {'error':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<36} {r.error:>12.3e} {r.tol:>8.0e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results)} checks, {len(failed)} failed" + (f": {', '.join(failed)}" if failed else ""))
    return "\n".join(lines)
