import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvi import mlp
from pvi.datasets import DataError, Dataset, generate_waveform, load_csv, split, standardize, write_csv
from pvi.targets import BnnRegression, LogisticRegression, make_banana, make_bimodal, make_gaussian, make_multimodal, make_xshape

from .conftest import fd_grad, rel_err

finite = st.floats(-6, 6, allow_nan=False)


def mixture_oracle(x, weights, means, covs):
    """Direct sum of Gaussian densities."""
    total = 0.0
    for w, m, S in zip(weights, means, covs):
        r = np.asarray(x) - m
        total += w * math.exp(-0.5 * r @ np.linalg.solve(S, r)) / (2 * math.pi * math.sqrt(np.linalg.det(S)))
    return math.log(total)


def test_multimodal_weight_ratio():
    t = make_multimodal()
    a, b = np.array([2.0, -2.0]), np.array([-2.0, 2.0])
    diff = t.log_joint(a) - t.log_joint(b)
    oracle = mixture_oracle(a, t.weights, t.means, t.covs) - mixture_oracle(b, t.weights, t.means, t.covs)
    assert diff == pytest.approx(oracle, abs=1e-12)
    # adjacent modes sit 4 apart, so the cross-terms are of order exp(-8)
    assert abs(diff - math.log(2.0)) < 2e-4


@pytest.mark.parametrize("make", [make_multimodal, make_xshape])
def test_mixture_density_matches_direct_sum(make, gen):
    t = make()
    for x in 2 * gen.standard_normal((10, 2)):
        assert t.log_joint(x) == pytest.approx(mixture_oracle(x, t.weights, t.means, t.covs), abs=1e-12)


def test_banana_normalised_and_stationary():
    t = make_banana()
    np.testing.assert_array_equal(t.grad_log_joint(np.zeros(2)), 0.0)
    # grid integral of the density is one
    x1, x2 = np.meshgrid(np.linspace(-12, 12, 601), np.linspace(-6, 40, 1151), indexing="ij")
    p = np.exp(t.log_joint(np.stack([x1.ravel(), x2.ravel()], 1)))
    assert p.sum() * (24 / 600) * (46 / 1150) == pytest.approx(1.0, abs=1e-4)


@pytest.mark.parametrize("make", [make_banana, make_xshape, make_multimodal, lambda: make_bimodal(2.0), lambda: make_bimodal(4.0, 5)])
def test_gradients_match_finite_differences(make, gen):
    t = make()
    for x in 2 * gen.standard_normal((20, t.d_x)):
        assert rel_err(t.grad_log_joint(x), fd_grad(t.log_joint, x)) < 1e-6


def test_batched_and_single_agree(gen):
    t = make_xshape()
    X = gen.standard_normal((7, 2))
    np.testing.assert_allclose(t.log_joint(X), [t.log_joint(x) for x in X], rtol=1e-14)
    np.testing.assert_allclose(t.grad_log_joint(X), [t.grad_log_joint(x) for x in X], rtol=1e-14)
    with pytest.raises(ValueError):
        t.log_joint(np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(finite, finite)
def test_banana_reflection_symmetry(a, b):
    t = make_banana()
    assert abs(t.log_joint(np.array([a, b])) - t.log_joint(np.array([-a, b]))) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([1.0, 2.0, 4.0]), finite, finite)
def test_bimodal_point_symmetry(mu, a, b):
    t = make_bimodal(mu)
    x = np.array([a, b])
    assert abs(t.log_joint(x) - t.log_joint(-x)) <= 1e-12


def test_bimodal_examples(gen):
    np.testing.assert_allclose(make_bimodal(2.0).grad_log_joint(np.zeros(2)), 0.0, atol=1e-15)
    X = 3 * gen.standard_normal((20, 2))
    np.testing.assert_allclose(make_bimodal(0.0).log_joint(X), make_gaussian(np.zeros(2)).log_joint(X), atol=1e-12)
    np.testing.assert_allclose(make_bimodal(3.0).means, [[3.0, 3.0], [-3.0, -3.0]])


def test_mixture_sampler_moments():
    t = make_xshape()
    X = t.sample(0, 200000)
    np.testing.assert_allclose(X.mean(0), 0.0, atol=0.02)
    np.testing.assert_allclose(np.cov(X.T), 2 * np.eye(2), atol=0.03)


def test_banana_sampler_moments():
    X = make_banana().sample(1, 200000)
    assert X[:, 0].var() == pytest.approx(2.0, rel=0.02)
    assert X[:, 1].mean() == pytest.approx(0.5, abs=0.02)


# -- logistic regression -------------------------------------------------------


def test_logistic_examples():
    data = Dataset(np.zeros((2, 1)), np.array([0.0, 1.0]))
    t = LogisticRegression(data)
    assert t.log_likelihood(np.zeros(2)) == pytest.approx(2 * math.log(0.5), abs=1e-15)
    one = LogisticRegression(Dataset(np.zeros((1, 0)), np.array([1.0])), prior_precision=1e-300)
    # intercept-only design: the single feature is the appended one
    np.testing.assert_allclose(one.grad_log_joint(np.zeros(1)), [0.5])
    e1 = LogisticRegression(Dataset(np.array([[1.0]]), np.array([1.0])), prior_precision=0.0 + 1e-300)
    e1.design = np.array([[1.0, 0.0]])  # w = e1
    np.testing.assert_allclose(e1.grad_log_joint(np.zeros(2)), [0.5, 0.0])


def test_logistic_prior_and_dimension():
    wave = generate_waveform(100, 0)
    t = LogisticRegression(wave)
    assert t.d_x == 22
    x = np.zeros(22)
    assert t.log_joint(x) - t.log_likelihood(x) == pytest.approx(-11 * (math.log(2 * math.pi) - math.log(0.01)))
    with pytest.raises(ValueError):
        LogisticRegression(Dataset(np.zeros((2, 1)), np.array([0.0, 2.0])))


def test_logistic_gradient_finite_differences(gen):
    t = LogisticRegression(generate_waveform(100, 3))
    for x in 0.1 * gen.standard_normal((20, 22)):
        assert rel_err(t.grad_log_joint(x), fd_grad(t.log_joint, x)) < 1e-6


def test_logistic_stable_at_large_logits():
    t = LogisticRegression(Dataset(np.array([[1.0], [-1.0]]), np.array([1.0, 0.0])))
    x = np.array([0.0, 1e4])
    assert np.isfinite(t.log_joint(x)) and np.all(np.isfinite(t.grad_log_joint(x)))
    assert t.log_likelihood(x) == pytest.approx(0.0, abs=1e-300)


def test_logistic_concavity(gen):
    t = LogisticRegression(generate_waveform(100, 4))
    for _ in range(50):
        a, b = 0.3 * gen.standard_normal((2, 22))
        mid = t.log_likelihood(0.5 * (a + b))
        assert mid >= 0.5 * (t.log_likelihood(a) + t.log_likelihood(b)) - 1e-10


# -- BNN regression ------------------------------------------------------------


def test_bnn_zero_point():
    t = BnnRegression(Dataset(np.ones((3, 2)), np.zeros(3)), 4)
    assert t.d_x == 2 * 4 + 4 + 4 + 1
    x = np.zeros(t.d_x)
    np.testing.assert_array_equal(t.grad_log_joint(x), 0.0)
    const = -0.5 * 3 * math.log(2 * math.pi * 1e-4) - 0.5 * t.d_x * math.log(2 * math.pi * 25)
    assert t.log_joint(x) == pytest.approx(const, rel=1e-14)


def test_bnn_bias_only_gradient():
    t = BnnRegression(Dataset(np.array([[0.7]]), np.array([1.3])), 3)
    x = np.zeros(t.d_x)
    x[3] = 0.4  # b2; W1 = 0 so the network is constant
    g = t.grad_log_joint(x)
    assert g[3] == pytest.approx((1.3 - 0.4) / 1e-4 - 0.4 / 25, rel=1e-12)


def _mlp_params(t, x):
    """The same network in the flat mlp layout [W1, b1, W2, b2]."""
    W2, b2, W1, b1 = t.unpack(x[None])
    return np.concatenate([W1[0].ravel(), b1[0], W2[0], [b2[0]]])


def test_bnn_matches_mlp_reference(gen):
    d_in, d_h = 3, 5
    O = gen.standard_normal((10, d_in))
    t = BnnRegression(Dataset(O, gen.standard_normal(10)), d_h)
    spec = mlp.MlpSpec((d_in, d_h, 1), activation="relu")
    x = gen.standard_normal(t.d_x)
    p = _mlp_params(t, x)
    f = mlp.forward(spec, p, O)[:, 0]
    np.testing.assert_allclose(t.predict(x), f, rtol=1e-12)
    cot = ((t.Y - f) / 1e-4)[:, None]
    g_ref = mlp.vjp_params(spec, p, O, cot) - p / 25
    np.testing.assert_allclose(_mlp_params(t, t.grad_log_joint(x)), g_ref, rtol=1e-10)


def test_bnn_yacht_sized_finite_differences(gen):
    t = BnnRegression(Dataset(gen.standard_normal((10, 6)), gen.standard_normal(10)), 10, noise_std=0.5)
    assert t.d_x == 81
    done = 0
    while done < 5:
        x = 0.5 * gen.standard_normal(t.d_x)
        W2, b2, W1, b1 = t.unpack(x[None])
        pre = t.O @ W1[0] + b1[0]
        if np.abs(pre).min() < 1e-3:  # too close to a ReLU kink for differences
            continue
        assert rel_err(t.grad_log_joint(x), fd_grad(t.log_joint, x)) < 1e-4
        done += 1


# -- datasets ------------------------------------------------------------------


def test_standardize_example():
    d = standardize(Dataset(np.array([[0.0], [2.0]]), np.array([1.0, 3.0])))
    np.testing.assert_array_equal(d.features[:, 0], [-1.0, 1.0])
    np.testing.assert_array_equal(d.responses, [-1.0, 1.0])


def test_standardize_moments_and_reuse(gen):
    raw = Dataset(5 + 3 * gen.standard_normal((50, 4)), gen.standard_normal(50))
    d = standardize(raw)
    assert np.abs(d.features.mean(0)).max() < 1e-9
    assert np.abs(d.features.std(0) - 1).max() < 1e-9
    again = standardize(raw, stats=d)
    np.testing.assert_array_equal(again.features, d.features)


def test_standardize_rejects_constant_column(gen):
    with pytest.raises(DataError, match="zero-variance"):
        standardize(Dataset(np.hstack([gen.standard_normal((5, 1)), np.ones((5, 1))]), np.arange(5.0)))


def test_split_counts_partition(gen):
    data = Dataset(np.arange(308.0)[:, None], np.arange(308.0))
    tr, te = split(data, 7, counts=(246, 62))
    assert len(tr) == 246 and len(te) == 62
    ids = np.concatenate([tr.responses, te.responses])
    np.testing.assert_array_equal(np.sort(ids), np.arange(308.0))
    tr2, _ = split(data, 7, counts=(246, 62))
    np.testing.assert_array_equal(tr.responses, tr2.responses)
    with pytest.raises(DataError):
        split(data, 0, counts=(300, 10))


def test_split_fraction():
    tr, te = split(Dataset(np.zeros((10, 1)), np.arange(10.0)), 0, train_fraction=0.9)
    assert (len(tr), len(te)) == (9, 1)


def test_csv_round_trip(tmp_path, gen):
    data = Dataset(gen.standard_normal((12, 3)), gen.standard_normal(12))
    write_csv(tmp_path / "d.csv", data)
    back = load_csv(tmp_path / "d.csv", header=True)
    np.testing.assert_array_equal(back.features, data.features)
    np.testing.assert_array_equal(back.responses, data.responses)


def test_csv_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2\n3,x\n")
    with pytest.raises(DataError, match="row 2, column 2"):
        load_csv(bad)
    bad.write_text("1,nan\n")
    with pytest.raises(DataError, match="NaN"):
        load_csv(bad)
    bad.write_text("1,2\n3\n")
    with pytest.raises(DataError, match="row 2"):
        load_csv(bad)


def test_waveform_generator():
    a = generate_waveform(300, 5)
    b = generate_waveform(300, 5)
    np.testing.assert_array_equal(a.features, b.features)
    assert a.features.shape == (300, 21)
    assert set(np.unique(a.responses)) == {0.0, 1.0}
    assert 0.2 < a.responses.mean() < 0.5
    three = generate_waveform(300, 5, binary=False)
    np.testing.assert_array_equal(three.responses == 0, a.responses == 1)
