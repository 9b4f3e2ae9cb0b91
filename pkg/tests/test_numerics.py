import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pvi.numerics import (
    NotPositiveDefiniteError,
    Rng,
    cholesky,
    exp_divided_differences,
    logsumexp,
    sample_std_normal,
    sym_matrix_exp,
    sym_matrix_exp_vjp,
)

from .conftest import fd_grad


def taylor_expm(S, terms=20):
    """Scaling-and-squaring Taylor series, independent of any eigensolver."""
    norm = np.abs(S).sum(axis=1).max()
    s = max(0, int(np.ceil(np.log2(norm))) + 1) if norm > 0 else 0
    A = S / 2**s
    out = np.eye(len(S))
    term = np.eye(len(S))
    for k in range(1, terms + 1):
        term = term @ A / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def test_logsumexp_examples():
    assert logsumexp([0.0]) == 0.0
    assert logsumexp([math.log(2), math.log(2)]) == pytest.approx(math.log(4), abs=1e-15)
    v = logsumexp([-1000.0, 0.0])
    assert 0.0 <= v <= 1e-300 + 1e-15


def test_logsumexp_empty_raises():
    with pytest.raises(ValueError):
        logsumexp([])


def test_logsumexp_all_minus_inf():
    assert logsumexp([-np.inf, -np.inf]) == -np.inf


@given(hnp.arrays(float, st.integers(1, 20), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_logsumexp_shift(x, c):
    assert logsumexp(x + c) == pytest.approx(logsumexp(x) + c, abs=1e-12)


def test_logsumexp_axis():
    a = np.array([[0.0, 1.0], [2.0, 3.0]])
    np.testing.assert_allclose(logsumexp(a, axis=1), np.log(np.exp(a).sum(axis=1)))


def test_sym_matrix_exp_examples():
    np.testing.assert_array_equal(sym_matrix_exp(np.zeros((3, 3))), np.eye(3))
    a = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(sym_matrix_exp(np.diag(a)), np.diag(np.exp(a)), rtol=1e-14)


def test_sym_matrix_exp_matches_taylor(gen):
    for _ in range(5):
        A = gen.standard_normal((3, 3))
        S = 0.5 * (A + A.T)
        np.testing.assert_allclose(sym_matrix_exp(S), taylor_expm(S), atol=1e-8, rtol=1e-8)


def test_sym_matrix_exp_eigenvalues(gen):
    A = gen.standard_normal((5, 5))
    S = 0.5 * (A + A.T)
    np.testing.assert_allclose(np.linalg.eigvalsh(sym_matrix_exp(S)), np.sort(np.exp(np.linalg.eigvalsh(S))), rtol=1e-8)


def test_sym_matrix_exp_non_square():
    with pytest.raises(ValueError):
        sym_matrix_exp(np.zeros((2, 3)))


def test_divided_differences_coincident_limit():
    lam = np.array([1.0, 1.0 + 1e-12, 2.0])
    F = exp_divided_differences(lam)
    assert F[0, 1] == pytest.approx(math.e, rel=1e-10)
    assert F[0, 2] == pytest.approx((math.exp(1) - math.exp(2)) / (1 - 2), rel=1e-14)


def test_sym_matrix_exp_vjp_fd(gen):
    A = 0.7 * gen.standard_normal((4, 4))
    G = gen.standard_normal((4, 4))
    fd = fd_grad(lambda S: float((sym_matrix_exp(S) * G).sum()), A)
    np.testing.assert_allclose(sym_matrix_exp_vjp(A, G), fd, atol=1e-8)


def test_cholesky_examples(gen):
    np.testing.assert_array_equal(cholesky(np.eye(3)), np.eye(3))
    np.testing.assert_array_equal(cholesky(4.0 * np.eye(2)), 2.0 * np.eye(2))
    B = gen.standard_normal((4, 4))
    A = B.T @ B + np.eye(4)
    L = cholesky(A)
    assert np.abs(L @ L.T - A).max() < 1e-10
    assert np.all(np.diag(L) > 0) and np.allclose(L, np.tril(L))


def test_cholesky_names_pivot():
    A = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 2.0], [0.0, 2.0, 1.0]])
    with pytest.raises(NotPositiveDefiniteError) as info:
        cholesky(A)
    assert info.value.index == 2


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 50), st.integers(0, 2**32 - 1))
def test_cholesky_round_trip(d, seed):
    B = np.random.default_rng(seed).standard_normal((d, d))
    A = B @ B.T + d * np.eye(d)
    L = cholesky(A)
    assert np.abs(L @ L.T - A).max() < 1e-10 * max(1.0, np.abs(A).max())


def test_rng_determinism_and_streams():
    a = sample_std_normal(Rng(7).stream(3), 5)
    b = sample_std_normal(Rng(7).stream(3), 5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, sample_std_normal(Rng(7).stream(4), 5))


def test_std_normal_moments():
    x = sample_std_normal(Rng(0).stream(0), 10**6)
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1.0) < 0.02
    assert np.all(np.isfinite(x))


def test_substreams_uncorrelated():
    a = sample_std_normal(Rng(0).stream(0), 10**5)
    b = sample_std_normal(Rng(0).stream(1), 10**5)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.02


def test_child_rng_differs():
    r = Rng(1)
    assert r.child(0).seed != r.child(1).seed
    assert r.child(0) == r.child(0)
