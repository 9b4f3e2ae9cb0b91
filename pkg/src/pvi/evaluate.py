"""Sample-based comparison: sliced Wasserstein, MMD test, moments and a Langevin oracle."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .numerics import as_generator
from .targets import Target


@dataclass
class SampleSet:
    points: np.ndarray
    source: str = "sid"  # sid | target | oracle

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"{self.source} samples contain non-finite entries")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


def _points(S) -> np.ndarray:
    P = S.points if isinstance(S, SampleSet) else SampleSet(S).points
    if len(P) < 2:
        raise ValueError("need at least two samples")
    return P


def random_directions(rng, n_proj: int, d: int) -> np.ndarray:
    v = as_generator(rng).standard_normal((n_proj, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_wasserstein(X, Y, n_proj: int = 100, rng=0) -> float:
    """sqrt of the projection-averaged squared 1-D W2 distance.

    The larger set is subsampled (seeded) to the size of the smaller one.
    """
    A, B = _points(X), _points(Y)
    if A.shape[1] != B.shape[1]:
        raise ValueError("sample sets live in different dimensions")
    gen = as_generator(rng)
    theta = random_directions(gen, n_proj, A.shape[1])
    n = min(len(A), len(B))
    if len(A) > n:
        A = A[np.sort(gen.choice(len(A), n, replace=False))]
    elif len(B) > n:
        B = B[np.sort(gen.choice(len(B), n, replace=False))]
    pa = np.sort(A @ theta.T, axis=0)
    pb = np.sort(B @ theta.T, axis=0)
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


@dataclass
class MmdResult:
    statistic: float
    p_value: float
    reject: bool
    bandwidth: float


def _sq_dists(P: np.ndarray) -> np.ndarray:
    sq = (P**2).sum(axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * P @ P.T
    return np.maximum(D, 0.0)


def mmd_permutation_test(X, Y, n_perm: int = 200, alpha: float = 0.05, rng=0) -> MmdResult:
    """Gaussian-kernel MMD^2 (biased V-statistic) with a label-permutation p-value.

    The bandwidth is the median pooled pairwise distance.
    """
    if n_perm < 99:
        raise ValueError("need at least 99 permutations")
    A, B = _points(X), _points(Y)
    P = np.vstack([A, B])
    n, N = len(A), len(A) + len(B)
    D = _sq_dists(P)
    med = float(np.median(np.sqrt(D[np.triu_indices(N, 1)])))
    if med == 0.0:
        if np.all(D == 0):
            return MmdResult(0.0, 1.0, False, 0.0)
        med = float(np.sqrt(D[D > 0]).min())
    Kmat = np.exp(-D / (2.0 * med**2))

    def stat(labels: np.ndarray) -> np.ndarray:
        # labels: (R, N) with +1/n for the first group and -1/m for the second
        return ((labels @ Kmat) * labels).sum(axis=1)

    w0 = np.concatenate([np.full(n, 1.0 / n), np.full(N - n, -1.0 / (N - n))])
    observed = float(stat(w0[None])[0])
    gen = as_generator(rng)
    perms = np.argsort(gen.random((n_perm, N)), axis=1)
    null = stat(w0[perms])
    p = (1.0 + np.sum(null >= observed - 1e-12 * abs(observed))) / (1.0 + n_perm)
    return MmdResult(max(observed, 0.0), float(p), bool(p <= alpha), med)


@dataclass
class Moments:
    mean: np.ndarray
    cov: np.ndarray
    corr: np.ndarray
    defined: np.ndarray  # False where a correlation involves a zero-variance coordinate


def moments(S) -> Moments:
    P = _points(S)
    mean = P.mean(axis=0)
    cov = np.atleast_2d(np.cov(P, rowvar=False, ddof=1))
    sd = np.sqrt(np.diag(cov))
    ok = sd > 0
    defined = ok[:, None] & ok[None, :]
    safe = np.where(ok, sd, 1.0)
    corr = np.where(defined, np.clip(cov / np.outer(safe, safe), -1.0, 1.0), 0.0)
    np.fill_diagonal(corr, 1.0)
    return Moments(mean, cov, corr, defined)


class OracleDivergence(FloatingPointError):
    pass


@dataclass
class LangevinResult:
    samples: SampleSet
    acceptance: float  # nan without the Metropolis correction


def langevin_oracle(target: Target, h: float, n_burn: int, n_keep: int, thin: int = 1, n_chains: int = 1,
                    rng=0, mala: bool = True, x0=None) -> LangevinResult:
    """Vectorised Langevin chains ``X <- X + h grad log p + sqrt(2h) eta``.

    With ``mala`` each proposal is accepted with the Metropolis-Hastings
    ratio. ``n_keep`` counts kept samples per chain.
    """
    if h <= 0 or thin < 1 or n_chains < 1 or n_keep < 1 or n_burn < 0:
        raise ValueError("invalid Langevin settings")
    gen = as_generator(rng)
    d = target.d_x
    X = np.zeros((n_chains, d)) if x0 is None else np.array(np.broadcast_to(x0, (n_chains, d)), dtype=float)
    lp = target.log_joint(X)
    g = target.grad_log_joint(X)
    out = np.empty((n_keep, n_chains, d))
    accepted = 0
    proposed = 0
    s = np.sqrt(2.0 * h)
    total = n_burn + n_keep * thin
    for t in range(total):
        Y = X + h * g + s * gen.standard_normal((n_chains, d))
        if mala:
            lp_y = target.log_joint(Y)
            g_y = target.grad_log_joint(Y)
            fwd = ((Y - X - h * g) ** 2).sum(axis=1)
            bwd = ((X - Y - h * g_y) ** 2).sum(axis=1)
            log_a = lp_y - lp - (bwd - fwd) / (4.0 * h)
            acc = np.log(gen.random(n_chains)) < log_a
            X = np.where(acc[:, None], Y, X)
            lp = np.where(acc, lp_y, lp)
            g = np.where(acc[:, None], g_y, g)
            if t >= n_burn:
                accepted += int(acc.sum())
                proposed += n_chains
        else:
            X = Y
            g = target.grad_log_joint(X)
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(g)):
            raise OracleDivergence(f"Langevin chain diverged at step {t}; try a smaller step size than {h:g}")
        if t >= n_burn and (t - n_burn) % thin == thin - 1:
            out[(t - n_burn) // thin] = X
    acc_rate = accepted / proposed if proposed else float("nan")
    return LangevinResult(SampleSet(out.reshape(-1, d), "oracle"), acc_rate)


METRIC_FIELDS = ("metric", "value", "n", "seed")


def write_metrics(path, rows) -> None:
    """Rows of (metric, value, n, seed)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for metric, value, n, seed in rows:
            w.writerow([metric, f"{float(value):.17g}", int(n), int(seed)])


def read_metrics(path) -> dict[str, float]:
    with open(path, encoding="utf-8", newline="") as fh:
        r = csv.DictReader(fh)
        if tuple(r.fieldnames or ()) != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected metrics header {r.fieldnames}")
        return {row["metric"]: float(row["value"]) for row in r}
