"""Seeded randomness and the small dense linear-algebra kit used across the package."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised by :func:`cholesky` when a pivot is not strictly positive."""

    def __init__(self, index: int, value: float):
        super().__init__(f"matrix is not positive definite: pivot {index} = {value!r}")
        self.index = index
        self.value = value


@dataclass(frozen=True)
class Rng:
    """Splittable random source.

    Every stream is a pure function of ``(seed, *key)``, so the noise used at a
    given (iteration, purpose) pair never depends on what else was drawn
    before it. Streams use the counter-based Philox generator.
    """

    seed: int

    def stream(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *key: int) -> "Rng":
        """An independent ``Rng`` whose seed is derived from this one and ``key``."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(k) for k in key))
        return Rng(int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1)))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, Rng):
        return rng.stream()
    return np.random.default_rng(rng)


def sample_std_normal(rng, n, d: int | None = None) -> np.ndarray:
    gen = as_generator(rng)
    shape = (n,) if d is None else (n, d)
    if n < 1:
        raise ValueError("need at least one draw")
    return gen.standard_normal(shape)


def logsumexp(values, axis=None) -> np.ndarray | float:
    """Shift-stable ``log(sum(exp(values)))``."""
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        raise ValueError("logsumexp of an empty array")
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def _check_square(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {S.shape}")
    return S


def sym_eigh(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    S = _check_square(S)
    return np.linalg.eigh(0.5 * (S + S.T))


def sym_matrix_exp(S: np.ndarray) -> np.ndarray:
    """``exp((S + S^T)/2)`` through a symmetric eigendecomposition."""
    lam, U = sym_eigh(S)
    out = (U * np.exp(lam)) @ U.T
    return 0.5 * (out + out.T)


def exp_divided_differences(lam: np.ndarray) -> np.ndarray:
    """First divided differences of ``exp`` on the eigenvalues ``lam``.

    ``F[i, j] = (e^{l_i} - e^{l_j}) / (l_i - l_j)``, with ``e^{l_i}`` on
    (near-)coincident pairs. This is the kernel of the Frechet derivative of
    the matrix exponential in the eigenbasis.
    """
    li = lam[:, None]
    lj = lam[None, :]
    diff = li - lj
    close = np.abs(diff) < 1e-8 * np.maximum(1.0, np.abs(li))
    # expm1 form keeps full precision for moderately close eigenvalues
    with np.errstate(divide="ignore", invalid="ignore"):
        F = np.exp(lj) * np.expm1(diff) / diff
    return np.where(close, np.exp(0.5 * (li + lj)), F)


def sym_matrix_exp_vjp(S: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Adjoint of ``S -> exp((S+S^T)/2)`` applied to the cotangent ``G``.

    Returns the gradient with respect to the raw (not necessarily symmetric)
    matrix ``S``.
    """
    lam, U = sym_eigh(S)
    F = exp_divided_differences(lam)
    H = U @ (F * (U.T @ G @ U)) @ U.T
    return 0.5 * (H + H.T)


def cholesky(A: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == A``.

    Column-oriented Cholesky-Crout. Raises :class:`NotPositiveDefiniteError`
    naming the first non-positive pivot.
    """
    A = _check_square(A)
    d = A.shape[0]
    L = np.zeros_like(A)
    for j in range(d):
        pivot = A[j, j] - L[j, :j] @ L[j, :j]
        if not pivot > 0.0:
            raise NotPositiveDefiniteError(j, float(pivot))
        L[j, j] = np.sqrt(pivot)
        if j + 1 < d:
            L[j + 1 :, j] = (A[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L
