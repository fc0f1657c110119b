import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harmonic_vae.autodiff import DenseNetwork, Layer
from harmonic_vae.lipschitz import (
    LipschitzEstimate,
    LipschitzReportRow,
    certify_decoder_variance,
    empirical_lipschitz,
    estimate_lipschitz,
    lipschitz_upper_bound,
    poincare_check,
    spectral_norm,
    write_lipschitz_report,
)
from harmonic_vae.measure import GaussianMeasure
from harmonic_vae.vae import VaeModel


def test_spectral_norm_examples():
    assert spectral_norm(np.eye(4)) == pytest.approx(1.0, abs=1e-12)
    assert spectral_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, abs=1e-12)
    expected = math.sqrt(15 + math.sqrt(221))
    assert expected == pytest.approx(5.464985704219043, abs=1e-15)
    assert spectral_norm([[1.0, 2.0], [3.0, 4.0]]) == pytest.approx(expected, rel=1e-10)


def test_spectral_norm_start_in_null_space():
    # the all-ones start is annihilated by this matrix
    assert spectral_norm([[1.0, -1.0]]) == pytest.approx(math.sqrt(2), rel=1e-10)
    with pytest.raises(ValueError):
        spectral_norm(np.zeros((2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 10_000))
def test_spectral_norm_matches_svd(m, n, seed):
    W = np.random.default_rng(seed).normal(size=(m, n))
    assert spectral_norm(W) == pytest.approx(np.linalg.norm(W, 2), rel=1e-6)


def test_upper_bound_examples():
    W = np.array([[1.0, 2.0], [3.0, 4.0]])
    net = DenseNetwork([Layer(W, np.zeros(2), "identity")])
    assert lipschitz_upper_bound(net) == pytest.approx(spectral_norm(W))
    sig = DenseNetwork([Layer(4 * np.eye(3), np.zeros(3), "sigmoid")])
    assert lipschitz_upper_bound(sig) == pytest.approx(1.0)


def test_upper_bound_scales_with_single_layer():
    net = DenseNetwork.init([3, 10, 10, 2], "tanh", np.random.default_rng(0))
    base = lipschitz_upper_bound(net)
    scaled = net.copy()
    scaled.layers[1].weight = -2.5 * scaled.layers[1].weight
    assert lipschitz_upper_bound(scaled) == pytest.approx(2.5 * base, rel=1e-8)


def test_empirical_linear_map():
    A = np.array([[2.0, 0.0, 1.0], [0.0, -1.0, 0.5]])
    net = DenseNetwork([Layer(A, [0.1, 0.2], "identity")])
    assert empirical_lipschitz(net, np.random.default_rng(1).normal(size=(5, 3))) == pytest.approx(
        np.linalg.norm(A, 2), rel=1e-12
    )


@pytest.mark.parametrize("activation", ["sigmoid", "tanh", "relu"])
def test_sandwich(activation):
    net = DenseNetwork.init([2, 32, 32, 3], activation, np.random.default_rng(2))
    est = estimate_lipschitz(net, 1000, seed=3)
    assert 0 <= est.empirical_lower_bound <= est.upper_bound
    assert est.sample_count == 1000


def test_empirical_monotone_in_sample_inclusion():
    net = DenseNetwork.init([2, 16, 1], "sigmoid", np.random.default_rng(4))
    pts = np.random.default_rng(5).normal(size=(200, 2))
    assert empirical_lipschitz(net, pts[:50]) <= empirical_lipschitz(net, pts)
    with pytest.raises(ValueError):
        empirical_lipschitz(net, np.zeros((0, 2)))


def test_estimate_invariant():
    with pytest.raises(ValueError):
        LipschitzEstimate(1.0, 2.0)


def test_poincare_examples():
    std = GaussianMeasure.standard(1)
    holds, slack = poincare_check(1.0, 1.0, std)
    assert holds and slack == 0.0
    holds, slack = poincare_check(0.0, 2.0, GaussianMeasure([0.0, 1.0], [0.5, 3.0]))
    assert holds and slack == pytest.approx(36.0)
    var_sin = (1 - math.exp(-2)) / 2
    holds, slack = poincare_check(var_sin, 1.0, std)
    assert holds and slack == pytest.approx(1 - 0.432332358381693654, abs=1e-12)
    assert not poincare_check(1.2, 1.0, std)[0]
    assert poincare_check(1.2, 1.0, std, var_se=0.1)[0]


def test_poincare_full_covariance_uses_largest_axis():
    m = GaussianMeasure.from_covariance([0.0, 0.0], [[2.0, 1.0], [1.0, 2.0]])
    assert poincare_check(0.0, 1.0, m)[1] == pytest.approx(3.0)


def test_certify_random_decoder():
    model = VaeModel.create(2, 2, hidden=(16, 16), fixed_sigma_phi=[0.3, 0.8], seed=6)
    x = np.random.default_rng(7).uniform(-1, 1, size=(10, 2))
    cert = certify_decoder_variance(model, x, n_samples=2000, seed=1)
    assert cert.variances.shape == (10, 2)
    assert cert.violations == 0
    assert cert.slack_min >= -3 * cert.std_errors.max()
    again = certify_decoder_variance(model, x, n_samples=2000, seed=1)
    np.testing.assert_array_equal(cert.variances, again.variances)


def test_report_csv(tmp_path):
    write_lipschitz_report([LipschitzReportRow("decoder", 0.1, 3.0, 1.0, 0.2, 0.5)], tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "network_id,sigma_phi_or_sigma,upper_bound,empirical_lower_bound,var_max,poincare_slack_min"
    assert lines[1] == "decoder,0.1,3,1,0.2,0.5"
