"""Reparameterised Gaussian kernels ``x = mean(z) + scale(z) * eps``.

Each kernel maps a batch of latent points ``Z`` (shape ``(M, d_z)``) to a
:class:`Components` record holding the Gaussian means and scales. The mixture
code in :mod:`pvi.sid` only ever talks to that record, and the VJPs only need
cotangents with respect to the mean and scale, so the network is evaluated
once per particle rather than once per Monte Carlo draw.

Scale conventions:

* ``iso``  -- one scalar ``sigma`` shared by every component
* ``diag`` -- per-component standard deviations, shape ``(M, d_x)``
* ``full`` -- one symmetric square root ``C`` with ``C @ C == Sigma``
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mlp
from .mlp import MlpSpec
from .numerics import as_generator, sym_eigh, sym_matrix_exp, sym_matrix_exp_vjp

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class Components:
    mean: np.ndarray
    kind: str
    scale: np.ndarray | float
    # full covariance only
    S: np.ndarray | None = None
    _inv_sqrt: np.ndarray | None = field(default=None, repr=False)

    @property
    def d(self) -> int:
        return self.mean.shape[1]

    def __len__(self) -> int:
        return self.mean.shape[0]

    def inv_sqrt(self) -> np.ndarray:
        if self._inv_sqrt is None:
            lam, U = sym_eigh(self.S)
            self._inv_sqrt = (U * np.exp(-0.5 * lam)) @ U.T
        return self._inv_sqrt

    def take(self, idx: np.ndarray) -> "Components":
        scale = self.scale[idx] if self.kind == "diag" else self.scale
        return Components(self.mean[idx], self.kind, scale, self.S, self._inv_sqrt)

    def covariance(self, m: int = 0) -> np.ndarray:
        if self.kind == "iso":
            return self.scale**2 * np.eye(self.d)
        if self.kind == "diag":
            return np.diag(self.scale[m] ** 2)
        return self.scale @ self.scale

    def log_det(self) -> np.ndarray:
        """log-determinant of each component covariance, shape ``(M,)``."""
        if self.kind == "iso":
            return np.full(len(self), 2.0 * self.d * np.log(self.scale))
        if self.kind == "diag":
            return 2.0 * np.log(self.scale).sum(axis=1)
        return np.full(len(self), float(np.trace(self.S)))

    def sample(self, eps: np.ndarray) -> np.ndarray:
        """Reparameterised draws.

        ``eps`` of shape ``(L, d)`` is shared by all components (common random
        numbers); shape ``(L, M, d)`` gives each component its own noise.
        Returns ``(L, M, d)``.
        """
        eps = np.asarray(eps, dtype=float)
        e = eps[:, None, :] if eps.ndim == 2 else eps
        if self.kind == "iso":
            noise = self.scale * e
        elif self.kind == "diag":
            noise = self.scale[None] * e
        else:
            noise = e @ self.scale
        return self.mean[None] + noise

    def scale_cotangent(self, eps: np.ndarray, d: np.ndarray):
        """Cotangent of the scale given per-sample output cotangents ``d`` (L, M, dx)."""
        if self.kind == "iso":
            if eps.ndim == 2:
                return float(np.einsum("li,li->", eps, d.sum(axis=1)))
            return float(np.einsum("lmi,lmi->", eps, d))
        if self.kind == "diag":
            e = eps[:, None, :] if eps.ndim == 2 else eps
            return (e * d).sum(axis=0)
        if eps.ndim == 2:
            return d.sum(axis=1).T @ eps
        return np.einsum("lmi,lmj->ij", d, eps)

    def _whiten(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        A = self.inv_sqrt()
        return x @ A, self.mean @ A

    def paired_log_density(self, x: np.ndarray) -> np.ndarray:
        """log N(x_m; mean_m, Sigma_m) for rows paired with components, shape (M,)."""
        r = x - self.mean
        if self.kind == "iso":
            q = (r**2).sum(axis=1) / self.scale**2
        elif self.kind == "diag":
            q = ((r / self.scale) ** 2).sum(axis=1)
        else:
            q = ((r @ self.inv_sqrt()) ** 2).sum(axis=1)
        return -0.5 * (q + self.d * LOG_2PI + self.log_det())

    def paired_grad_x(self, x: np.ndarray) -> np.ndarray:
        r = x - self.mean
        if self.kind == "iso":
            return -r / self.scale**2
        if self.kind == "diag":
            return -r / self.scale**2
        A = self.inv_sqrt()
        return -(r @ A) @ A

    def pairwise_quad(self, x: np.ndarray) -> np.ndarray:
        """Squared Mahalanobis distances between every x_n and mean_m, shape (N, M)."""
        x = np.atleast_2d(x)
        if self.kind == "diag":
            P = 1.0 / self.scale**2
            q = (x**2) @ P.T - 2.0 * x @ (self.mean * P).T + (self.mean**2 * P).sum(axis=1)
            return np.maximum(q, 0.0, out=q)
        if self.kind == "full":
            xw, mw = self._whiten(x)
        else:
            xw, mw = x, self.mean
        q = xw @ mw.T
        q *= -2.0
        q += (xw**2).sum(axis=1)[:, None]
        q += (mw**2).sum(axis=1)[None, :]
        np.maximum(q, 0.0, out=q)
        if self.kind == "iso":
            q /= self.scale**2
        return q

    def pairwise_logits(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(logits, offset)`` with ``log N(x_n; mean_m, Sigma_m) = logits[n, m] + offset[n]``.

        Terms constant along m are moved into ``offset`` so softmax-style
        reductions over components need a single matrix product.
        """
        x = np.atleast_2d(x)
        if self.kind == "diag":
            return self.pairwise_log_density(x), np.zeros(len(x))
        if self.kind == "full":
            xw, mw = self._whiten(x)
            s2 = 1.0
        else:
            xw, mw = x, self.mean
            s2 = self.scale**2
        # one product with an appended unit column also adds -|m|^2 / 2
        xa = np.empty((len(xw), self.d + 1))
        xa[:, :-1] = xw
        xa[:, -1] = 1.0
        ma = np.hstack([mw, -0.5 * (mw**2).sum(axis=1, keepdims=True)]) / s2
        const = -0.5 * (self.d * LOG_2PI + self.log_det()[0])
        return xa @ ma.T, const - 0.5 * (xw**2).sum(axis=1) / s2

    def pairwise_log_density(self, x: np.ndarray) -> np.ndarray:
        """log N(x_n; mean_m, Sigma_m) for every (n, m), shape (N, M)."""
        q = self.pairwise_quad(x)
        q += self.d * LOG_2PI + self.log_det()[None, :]
        q *= -0.5
        return q

    def weighted_grad_x(self, x: np.ndarray, w: np.ndarray, total: np.ndarray | None = None) -> np.ndarray:
        """sum_m w[n, m] * grad_x log N(x_n; mean_m, Sigma_m), shape (N, d).

        The rows of ``w`` sum to one, or to ``total`` when it is given.
        """
        t = np.ones(len(x)) if total is None else np.asarray(total)
        if self.kind == "iso":
            return -(x - (w @ self.mean) / t[:, None]) / self.scale**2
        if self.kind == "diag":
            P = 1.0 / self.scale**2
            return -(x * (w @ P) - w @ (self.mean * P)) / t[:, None]
        A = self.inv_sqrt()
        return -((x - (w @ self.mean) / t[:, None]) @ A) @ A


class Kernel:
    """Base class. Subclasses define the parameter layout and the maps."""

    name = "kernel"
    d_z: int
    d_x: int

    @property
    def n_params(self) -> int:
        raise NotImplementedError

    def init(self, rng) -> np.ndarray:
        raise NotImplementedError

    def components(self, theta: np.ndarray, Z: np.ndarray) -> Components:
        raise NotImplementedError

    def backward(self, theta, Z, cot_mean, cot_scale, *, want_theta=True, want_z=True):
        """VJP of (mean, scale) at ``Z`` with the given cotangents.

        Returns ``(theta_grad, z_grad)`` where ``z_grad`` has shape
        ``(M, d_z)``; parameter gradients are summed over components.
        """
        raise NotImplementedError

    def check(self, theta: np.ndarray, Z: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"{self.name}: expected {self.n_params} parameters, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise FloatingPointError(f"{self.name}: non-finite kernel parameters")
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[1] != self.d_z:
            raise ValueError(f"{self.name}: latent points have shape {Z.shape}, expected (M, {self.d_z})")
        return Z

    def describe(self) -> dict:
        return {"variant": self.name, "d_z": self.d_z, "d_x": self.d_x, "n_params": self.n_params}


@dataclass
class Constant(Kernel):
    """``N(x; z, c I)``; no learnable parameters."""

    d: int
    c: float = 1.0
    name = "constant"

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("constant kernel variance must be positive")
        self.d_z = self.d_x = self.d

    @property
    def n_params(self) -> int:
        return 0

    def init(self, rng) -> np.ndarray:
        return np.zeros(0)

    def components(self, theta, Z):
        Z = self.check(theta, Z)
        return Components(Z.copy(), "iso", float(np.sqrt(self.c)))

    def backward(self, theta, Z, cot_mean, cot_scale, *, want_theta=True, want_z=True):
        return (np.zeros(0) if want_theta else None), (np.array(cot_mean, dtype=float) if want_z else None)


@dataclass
class _IsoNet(Kernel):
    """Shared machinery for Push / Skip / LSkip: mean from a network, global log-sigma."""

    d_z: int
    d_x: int
    net: MlpSpec
    linear: bool = False  # learnable W
    skip: bool = False  # identity skip (requires d_z == d_x)
    log_sigma0: float = 0.0
    w_init: str = "zero"

    def __post_init__(self):
        if self.net.d_in != self.d_z or self.net.d_out != self.d_x:
            raise ValueError(f"{self.name}: network maps {self.net.d_in}->{self.net.d_out}, "
                             f"kernel needs {self.d_z}->{self.d_x}")
        if self.skip and self.d_z != self.d_x:
            raise ValueError("skip kernel requires d_z == d_x")

    @property
    def n_w(self) -> int:
        return self.d_x * self.d_z if self.linear else 0

    @property
    def n_params(self) -> int:
        return self.n_w + self.net.n_params + 1

    def split(self, theta):
        W = theta[: self.n_w].reshape(self.d_x, self.d_z) if self.linear else None
        net = theta[self.n_w : self.n_w + self.net.n_params]
        return W, net, theta[-1]

    def init(self, rng) -> np.ndarray:
        gen = as_generator(rng)
        parts = []
        if self.linear:
            parts.append(_init_w(self.d_x, self.d_z, self.w_init).ravel())
        parts.append(mlp.init_params(self.net, gen))
        parts.append([self.log_sigma0])
        return np.concatenate(parts)

    def _mean(self, W, net, Z):
        mean = mlp.forward(self.net, net, Z)
        if self.skip:
            mean = mean + Z
        if W is not None:
            mean = mean + Z @ W.T
        return mean

    def components(self, theta, Z):
        Z = self.check(theta, Z)
        W, net, ls = self.split(theta)
        return Components(self._mean(W, net, Z), "iso", float(np.exp(ls)))

    def backward(self, theta, Z, cot_mean, cot_scale, *, want_theta=True, want_z=True):
        Z = self.check(theta, Z)
        W, net, ls = self.split(theta)
        g_net, g_in = mlp.vjp(self.net, net, Z, cot_mean, want_params=want_theta, want_input=want_z)
        g_theta = None
        if want_theta:
            parts = []
            if self.linear:
                parts.append((cot_mean.T @ Z).ravel())
            parts.append(g_net)
            parts.append([np.exp(ls) * cot_scale])
            g_theta = np.concatenate(parts)
        if want_z:
            if self.skip:
                g_in = g_in + cot_mean
            if W is not None:
                g_in = g_in + cot_mean @ W
        return g_theta, g_in


def _init_w(d_x: int, d_z: int, how: str) -> np.ndarray:
    if how == "zero":
        return np.zeros((d_x, d_z))
    if how == "identity":
        return np.eye(d_x, d_z)
    raise ValueError(f"unknown W initialisation {how!r}")


class Push(_IsoNet):
    """``N(x; f(z), sigma^2 I)``."""

    name = "push"

    def __init__(self, d_z, d_x, net, log_sigma0=0.0):
        super().__init__(d_z, d_x, net, log_sigma0=log_sigma0)


class Skip(_IsoNet):
    """``N(x; z + f(z), sigma^2 I)``."""

    name = "skip"

    def __init__(self, d, net, log_sigma0=0.0):
        super().__init__(d, d, net, skip=True, log_sigma0=log_sigma0)


class LSkip(_IsoNet):
    """``N(x; W z + f(z), sigma^2 I)``."""

    name = "lskip"

    def __init__(self, d_z, d_x, net, log_sigma0=0.0, w_init="zero"):
        super().__init__(d_z, d_x, net, linear=True, log_sigma0=log_sigma0, w_init=w_init)


@dataclass
class LSkipFullCov(Kernel):
    """``N(x; W z + f(z), exp(sym(M)))`` with a learnable matrix ``M``.

    Draws use the symmetric square root ``exp(sym(M)/2)``.
    """

    d_z: int
    d_x: int
    net: MlpSpec
    w_init: str = "zero"
    name = "lskip_fullcov"

    def __post_init__(self):
        if self.net.d_in != self.d_z or self.net.d_out != self.d_x:
            raise ValueError("network dimensions do not match the kernel")

    @property
    def n_params(self) -> int:
        return self.d_x * self.d_z + self.net.n_params + self.d_x**2

    def split(self, theta):
        nw = self.d_x * self.d_z
        W = theta[:nw].reshape(self.d_x, self.d_z)
        net = theta[nw : nw + self.net.n_params]
        M = theta[nw + self.net.n_params :].reshape(self.d_x, self.d_x)
        return W, net, M

    def init(self, rng) -> np.ndarray:
        gen = as_generator(rng)
        return np.concatenate([
            _init_w(self.d_x, self.d_z, self.w_init).ravel(),
            mlp.init_params(self.net, gen),
            np.zeros(self.d_x**2),
        ])

    def components(self, theta, Z):
        Z = self.check(theta, Z)
        W, net, M = self.split(theta)
        mean = mlp.forward(self.net, net, Z) + Z @ W.T
        S = 0.5 * (M + M.T)
        return Components(mean, "full", sym_matrix_exp(0.5 * S), S=S)

    def backward(self, theta, Z, cot_mean, cot_scale, *, want_theta=True, want_z=True):
        Z = self.check(theta, Z)
        W, net, M = self.split(theta)
        g_net, g_in = mlp.vjp(self.net, net, Z, cot_mean, want_params=want_theta, want_input=want_z)
        g_theta = None
        if want_theta:
            g_M = 0.5 * sym_matrix_exp_vjp(0.5 * M, np.asarray(cot_scale, dtype=float))
            g_theta = np.concatenate([(cot_mean.T @ Z).ravel(), g_net, g_M.ravel()])
        if want_z:
            g_in = g_in + cot_mean @ W
        return g_theta, g_in


@dataclass
class LSkipHetero(Kernel):
    """``N(x; W z + f(z), diag(sigma(z)^2))``.

    ``f`` and ``sigma`` share a trunk and differ only in their final linear
    layer; ``sigma = softplus(.) + eps0``.
    """

    d_z: int
    d_x: int
    d_h: int
    slope: float = 0.01
    eps0: float = 1e-8
    w_init: str = "zero"
    name = "lskip_hetero"

    def __post_init__(self):
        self.trunk = MlpSpec((self.d_z, self.d_h, self.d_h), slope=self.slope, output="leaky_relu")
        self.mean_head = MlpSpec((self.d_h, self.d_x))
        self.scale_head = MlpSpec((self.d_h, self.d_x), output="softplus", eps=self.eps0)

    @property
    def n_params(self) -> int:
        return self.d_x * self.d_z + self.trunk.n_params + self.mean_head.n_params + self.scale_head.n_params

    def split(self, theta):
        sizes = [self.d_x * self.d_z, self.trunk.n_params, self.mean_head.n_params, self.scale_head.n_params]
        W, tr, mh, sh = np.split(theta, np.cumsum(sizes)[:-1])
        return W.reshape(self.d_x, self.d_z), tr, mh, sh

    def init(self, rng) -> np.ndarray:
        gen = as_generator(rng)
        return np.concatenate([
            _init_w(self.d_x, self.d_z, self.w_init).ravel(),
            mlp.init_params(self.trunk, gen),
            mlp.init_params(self.mean_head, gen),
            mlp.init_params(self.scale_head, gen),
        ])

    def components(self, theta, Z):
        Z = self.check(theta, Z)
        W, tr, mh, sh = self.split(theta)
        h = mlp.forward(self.trunk, tr, Z)
        mean = mlp.forward(self.mean_head, mh, h) + Z @ W.T
        return Components(mean, "diag", mlp.forward(self.scale_head, sh, h))

    def backward(self, theta, Z, cot_mean, cot_scale, *, want_theta=True, want_z=True):
        Z = self.check(theta, Z)
        W, tr, mh, sh = self.split(theta)
        h = mlp.forward(self.trunk, tr, Z)
        g_mh, g_h1 = mlp.vjp(self.mean_head, mh, h, cot_mean, want_params=want_theta)
        g_sh, g_h2 = mlp.vjp(self.scale_head, sh, h, cot_scale, want_params=want_theta)
        g_tr, g_in = mlp.vjp(self.trunk, tr, Z, g_h1 + g_h2, want_params=want_theta, want_input=want_z)
        g_theta = None
        if want_theta:
            g_theta = np.concatenate([(cot_mean.T @ Z).ravel(), g_tr, g_mh, g_sh])
        if want_z:
            g_in = g_in + cot_mean @ W
        return g_theta, g_in


# -- single-point operations -------------------------------------------------


def _pair(kernel: Kernel, z, other):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = z[None] if single else z
    o = np.asarray(other, dtype=float)
    O = o[None] if o.ndim == 1 else o
    if O.shape != (Z.shape[0], kernel.d_x):
        raise ValueError(f"expected shape (..., {kernel.d_x}), got {o.shape}")
    return Z, O, single


def kernel_sample(kernel: Kernel, theta, z, eps) -> np.ndarray:
    """phi_theta(z, eps); rows of ``z`` and ``eps`` are paired."""
    Z, E, single = _pair(kernel, z, eps)
    out = kernel.components(theta, Z).sample(E[None])[0]
    return out[0] if single else out


def kernel_log_density(kernel: Kernel, theta, x, z):
    Z, X, single = _pair(kernel, z, x)
    out = kernel.components(theta, Z).paired_log_density(X)
    return float(out[0]) if single else out


def kernel_grad_x_log_density(kernel: Kernel, theta, x, z) -> np.ndarray:
    Z, X, single = _pair(kernel, z, x)
    out = kernel.components(theta, Z).paired_grad_x(X)
    return out[0] if single else out


def _paired_cotangents(kernel, theta, Z, E, V):
    comp = kernel.components(theta, Z)
    d = V[None]  # (1, M, dx): one draw per component
    return comp.scale_cotangent(E[None], d)


def kernel_vjp_theta(kernel: Kernel, theta, z, eps, cotangent) -> np.ndarray:
    """(grad_theta phi(z, eps)) . cotangent, summed over paired rows."""
    Z, E, _ = _pair(kernel, z, eps)
    _, V, _ = _pair(kernel, z, cotangent)
    cs = _paired_cotangents(kernel, theta, Z, E, V)
    return kernel.backward(theta, Z, V, cs, want_z=False)[0]


def kernel_vjp_z(kernel: Kernel, theta, z, eps, cotangent) -> np.ndarray:
    Z, E, single = _pair(kernel, z, eps)
    _, V, _ = _pair(kernel, z, cotangent)
    cs = _paired_cotangents(kernel, theta, Z, E, V)
    out = kernel.backward(theta, Z, V, cs, want_theta=False)[1]
    return out[0] if single else out
