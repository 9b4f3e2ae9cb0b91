"""Unnormalised target densities with analytic gradients.

All targets accept a single point ``(d,)`` or a batch ``(N, d)`` and return a
scalar / ``(N,)`` log density and ``(d,)`` / ``(N, d)`` gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import Dataset
from .numerics import as_generator, logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))


def _batch(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None] if single else x
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got shape {x.shape}")
    return X, single


class Target:
    """Base class: subclasses implement ``_log_joint`` and ``_grad`` on batches."""

    name = "target"
    d_x: int

    def log_joint(self, x):
        X, single = _batch(x, self.d_x)
        out = self._log_joint(X)
        return float(out[0]) if single else out

    def grad_log_joint(self, x) -> np.ndarray:
        X, single = _batch(x, self.d_x)
        out = self._grad(X)
        return out[0] if single else out

    def sample(self, rng, n: int) -> np.ndarray:
        raise NotImplementedError(f"{self.name} has no exact sampler")

    def _log_joint(self, X):
        raise NotImplementedError

    def _grad(self, X):
        raise NotImplementedError


@dataclass
class GaussianMixture(Target):
    """Normalised mixture of full-covariance Gaussians."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    name: str = "mixture"
    _prec: np.ndarray = field(init=False, repr=False)
    _logc: np.ndarray = field(init=False, repr=False)
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        K, d = self.means.shape
        covs = np.asarray(self.covs, dtype=float)
        if covs.ndim == 2:
            covs = np.broadcast_to(covs, (K, d, d))
        self.covs = covs
        if self.weights.shape != (K,) or not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("mixture weights must be a probability vector")
        self.d_x = d
        self._prec = np.linalg.inv(covs)
        _, logdet = np.linalg.slogdet(covs)
        self._logc = np.log(self.weights) - 0.5 * (d * LOG_2PI + logdet)
        self._chol = np.linalg.cholesky(covs)

    def _component_terms(self, X):
        """Component log-densities (K, N) and precision-weighted residuals (K, d, N).

        Points are stored column-wise so each coordinate is a contiguous row.
        """
        Xt = np.ascontiguousarray(X.T)
        K = len(self.weights)
        logk = np.empty((K, len(X)))
        pr = np.empty((K, self.d_x, len(X)))
        for k in range(K):
            r = Xt - self.means[k][:, None]
            pr[k] = self._prec[k] @ r  # precision matrices are symmetric
            logk[k] = self._logc[k] - 0.5 * (r * pr[k]).sum(axis=0)
        return logk, pr

    def _log_joint(self, X):
        logk, _ = self._component_terms(X)
        return logsumexp(logk, axis=0)

    def _grad(self, X):
        logk, pr = self._component_terms(X)
        resp = np.exp(logk - logsumexp(logk, axis=0))
        return -np.einsum("kn,kdn->nd", resp, pr)

    def sample(self, rng, n: int) -> np.ndarray:
        gen = as_generator(rng)
        k = gen.choice(len(self.weights), size=n, p=self.weights)
        eps = gen.standard_normal((n, self.d_x))
        return self.means[k] + np.einsum("nij,nj->ni", self._chol[k], eps)


def make_gaussian(mean, cov=None) -> GaussianMixture:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.eye(len(mean)) if cov is None else np.asarray(cov, dtype=float)
    return GaussianMixture(np.ones(1), mean[None], cov[None], name="gaussian")


def make_xshape() -> GaussianMixture:
    covs = np.array([[[2.0, 1.8], [1.8, 2.0]], [[2.0, -1.8], [-1.8, 2.0]]])
    return GaussianMixture(np.array([0.5, 0.5]), np.zeros((2, 2)), covs, name="xshape")


def make_multimodal() -> GaussianMixture:
    means = np.array([[2.0, 2.0], [-2.0, -2.0], [2.0, -2.0], [-2.0, 2.0]])
    w = np.array([1 / 8, 1 / 8, 1 / 2, 1 / 4])
    return GaussianMixture(w, means, np.eye(2), name="multimodal")


def make_bimodal(mu: float, d: int = 2) -> GaussianMixture:
    """Equal mixture of N(mu * 1, I) and N(-mu * 1, I)."""
    m = np.full(d, float(mu))
    return GaussianMixture(np.array([0.5, 0.5]), np.stack([m, -m]), np.eye(d), name=f"bimodal({mu:g})")


@dataclass
class Banana(Target):
    """N(x2; x1^2/4, 1) N(x1; 0, 2), the second argument being a variance."""

    var1: float = 2.0
    name: str = "banana"

    def __post_init__(self):
        self.d_x = 2

    def _log_joint(self, X):
        x1, x2 = X[:, 0], X[:, 1]
        r = x2 - 0.25 * x1**2
        return -0.5 * x1**2 / self.var1 - 0.5 * r**2 - LOG_2PI - 0.5 * np.log(self.var1)

    def _grad(self, X):
        x1, x2 = X[:, 0], X[:, 1]
        r = x2 - 0.25 * x1**2
        return np.stack([-x1 / self.var1 + 0.5 * r * x1, -r], axis=1)

    def sample(self, rng, n: int) -> np.ndarray:
        gen = as_generator(rng)
        x1 = gen.standard_normal(n) * np.sqrt(self.var1)
        return np.stack([x1, 0.25 * x1**2 + gen.standard_normal(n)], axis=1)


def make_banana() -> Banana:
    return Banana()


@dataclass
class Shifted(Target):
    """``target`` with a constant added to its log density."""

    base: Target
    shift: float

    def __post_init__(self):
        self.d_x = self.base.d_x
        self.name = f"{self.base.name}+{self.shift:g}"

    def _log_joint(self, X):
        return self.base._log_joint(X) + self.shift

    def _grad(self, X):
        return self.base._grad(X)

    def sample(self, rng, n):
        return self.base.sample(rng, n)


class LogisticRegression(Target):
    """Bernoulli-logit likelihood with an intercept and an isotropic Gaussian prior."""

    name = "logistic"

    def __init__(self, data: Dataset, prior_precision: float = 0.01, chunk: int = 2048):
        y = np.asarray(data.responses, dtype=float)
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("logistic regression needs responses in {0, 1}")
        F = np.asarray(data.features, dtype=float)
        self.design = np.hstack([np.ones((F.shape[0], 1)), F])
        self.y = y
        self.prior_precision = float(prior_precision)
        self.d_x = self.design.shape[1]
        self.chunk = chunk

    def log_likelihood(self, x):
        X, single = _batch(x, self.d_x)
        t = X @ self.design.T
        out = (self.y * t - np.logaddexp(0.0, t)).sum(axis=1)
        return float(out[0]) if single else out

    def _log_prior(self, X):
        a = self.prior_precision
        return -0.5 * a * (X**2).sum(axis=1) - 0.5 * self.d_x * (LOG_2PI - np.log(a))

    def _log_joint(self, X):
        out = np.empty(len(X))
        for s in range(0, len(X), self.chunk):
            Xc = X[s : s + self.chunk]
            t = Xc @ self.design.T
            out[s : s + self.chunk] = (self.y * t - np.logaddexp(0.0, t)).sum(axis=1)
        return out + self._log_prior(X)

    def _grad(self, X):
        out = np.empty_like(X)
        for s in range(0, len(X), self.chunk):
            t = X[s : s + self.chunk] @ self.design.T
            sig = 0.5 * (1.0 + np.tanh(0.5 * t))
            out[s : s + self.chunk] = (self.y - sig) @ self.design
        return out - self.prior_precision * X


def make_logistic_regression(data: Dataset, prior_precision: float = 0.01) -> LogisticRegression:
    return LogisticRegression(data, prior_precision)


class BnnRegression(Target):
    """One-hidden-layer ReLU regression network with Gaussian likelihood and prior.

    Parameter layout: ``[W2 (d_h), b2, W1 (d_in x d_h, row-major), b1 (d_h)]``;
    the network is ``f(o) = W2 . relu(o @ W1 + b1) + b2``.
    """

    name = "bnn"

    def __init__(self, data: Dataset, d_h: int, noise_std: float = 0.01, prior_var: float = 25.0,
                 chunk: int = 512):
        self.O = np.asarray(data.features, dtype=float)
        self.Y = np.asarray(data.responses, dtype=float)
        self.d_in = self.O.shape[1]
        self.d_h = int(d_h)
        self.noise_std = float(noise_std)
        self.prior_var = float(prior_var)
        self.d_x = self.d_in * self.d_h + 2 * self.d_h + 1
        self.chunk = chunk

    def unpack(self, X):
        h, i = self.d_h, self.d_in
        W2 = X[:, :h]
        b2 = X[:, h]
        W1 = X[:, h + 1 : h + 1 + i * h].reshape(-1, i, h)
        b1 = X[:, h + 1 + i * h :]
        return W2, b2, W1, b1

    def predict(self, x, O=None) -> np.ndarray:
        """Network outputs, shape (N, n_obs) (or (n_obs,) for a single x)."""
        X, single = _batch(x, self.d_x)
        O = self.O if O is None else np.asarray(O, dtype=float)
        W2, b2, W1, b1 = self.unpack(X)
        H = np.maximum(np.einsum("bi,nih->nbh", O, W1) + b1[:, None, :], 0.0)
        out = np.einsum("nbh,nh->nb", H, W2) + b2[:, None]
        return out[0] if single else out

    def _log_prior(self, X):
        return -0.5 * (X**2).sum(axis=1) / self.prior_var - 0.5 * self.d_x * (LOG_2PI + np.log(self.prior_var))

    def _log_joint(self, X):
        out = np.empty(len(X))
        s2 = self.noise_std**2
        const = -0.5 * len(self.Y) * (LOG_2PI + np.log(s2))
        for s in range(0, len(X), self.chunk):
            r = self.Y[None] - self.predict(X[s : s + self.chunk])
            out[s : s + self.chunk] = -0.5 * (r**2).sum(axis=1) / s2 + const
        return out + self._log_prior(X)

    def _grad(self, X):
        out = np.empty_like(X)
        h, i = self.d_h, self.d_in
        s2 = self.noise_std**2
        for s in range(0, len(X), self.chunk):
            Xc = X[s : s + self.chunk]
            W2, b2, W1, b1 = self.unpack(Xc)
            pre = np.einsum("bi,nih->nbh", self.O, W1) + b1[:, None, :]
            H = np.maximum(pre, 0.0)
            f = np.einsum("nbh,nh->nb", H, W2) + b2[:, None]
            e = (self.Y[None] - f) / s2  # d loglik / d f
            gH = e[:, :, None] * W2[:, None, :] * (pre >= 0.0)
            g = out[s : s + self.chunk]
            g[:, :h] = np.einsum("nb,nbh->nh", e, H)
            g[:, h] = e.sum(axis=1)
            g[:, h + 1 : h + 1 + i * h] = np.einsum("bi,nbh->nih", self.O, gH).reshape(len(Xc), -1)
            g[:, h + 1 + i * h :] = gH.sum(axis=1)
        return out - X / self.prior_var


def make_bnn_regression(data: Dataset, d_h: int, **kw) -> BnnRegression:
    return BnnRegression(data, d_h, **kw)


TOY_TARGETS = {
    "banana": make_banana,
    "xshape": make_xshape,
    "multimodal": make_multimodal,
}
