import math

import numpy as np
import pytest

from harmonic_vae.autodiff import DenseNetwork, Layer
from harmonic_vae.measure import EstimatorConfig
from harmonic_vae.vae import (
    DEFAULT_LIKELIHOOD_SCALE,
    ElboReport,
    TrainConfig,
    VaeModel,
    add_input_noise,
    bias_variance_likelihood,
    decoder_hermite_variance,
    degree_profile,
    elbo,
    elbo_gradients,
    encode,
    kl_diag_gaussian,
    reconstruct,
    reparameterize,
    train,
)


def linear_model(a=0.8, b=0.1, c=1.5, d=-0.2, sigma_phi=0.4, scale=DEFAULT_LIKELIHOOD_SCALE):
    enc = DenseNetwork([Layer([[a]], [b], "identity")])
    dec = DenseNetwork([Layer([[c]], [d], "identity")])
    return VaeModel(enc, dec, fixed_sigma_phi=[sigma_phi], likelihood_scale=scale)


def small_model(seed=0, data_dim=3, latent_dim=2, fixed=None, hidden=(8,)):
    model = VaeModel.create(data_dim, latent_dim, hidden=hidden, activation="tanh",
                            fixed_sigma_phi=fixed, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for net in model.networks():
        for layer in net.layers:
            layer.bias = rng.normal(scale=0.2, size=layer.bias.shape)
    return model


def constant_decoder_model(c, data_dim=2, latent_dim=2, sigma_phi=0.7):
    enc = DenseNetwork.init([data_dim, 4, latent_dim], "tanh", np.random.default_rng(0))
    dec = DenseNetwork([Layer(np.zeros((data_dim, latent_dim)), c, "identity")])
    return VaeModel(enc, dec, fixed_sigma_phi=sigma_phi)


def sinc_data(n=64):
    t = np.linspace(-1, 1, n)
    return np.sinc(5 * t)[:, None]


def test_encode_fixed_mode():
    model = small_model(fixed=0.5)
    _, sigma = encode(model, np.random.default_rng(0).normal(size=(5, 3)))
    np.testing.assert_array_equal(sigma, 0.5)


def test_encode_learned_positive_and_deterministic():
    model = small_model()
    x = np.random.default_rng(0).normal(size=(7, 3))
    mu1, s1 = encode(model, x)
    mu2, s2 = encode(model, x)
    assert np.all(s1 > 0)
    np.testing.assert_array_equal(mu1, mu2)
    np.testing.assert_array_equal(s1, s2)
    with pytest.raises(ValueError):
        encode(model, np.zeros(4))


def test_model_validation():
    enc = DenseNetwork([Layer(np.eye(2), np.zeros(2), "identity")])
    dec = DenseNetwork([Layer(np.eye(2), np.zeros(2), "identity")])
    with pytest.raises(ValueError):
        VaeModel(enc, dec)
    with pytest.raises(ValueError):
        VaeModel(enc, dec, fixed_sigma_phi=[0.5, 0.0])
    with pytest.raises(ValueError):
        VaeModel(enc, dec, fixed_sigma_phi=0.5, likelihood_scale=0.0)
    bad_dec = DenseNetwork([Layer(np.eye(3)[:, :2], np.zeros(3), "identity")])
    with pytest.raises(ValueError):
        VaeModel(enc, bad_dec, fixed_sigma_phi=0.5)


def test_reparameterize_examples():
    mu = np.array([0.3, -1.0])
    sigma = np.array([2.0, 0.5])
    np.testing.assert_array_equal(reparameterize(mu, sigma, np.zeros(2)), mu)
    eps = np.array([0.7, -0.1])
    np.testing.assert_array_equal(reparameterize(np.zeros(2), np.ones(2), eps), eps)
    with pytest.raises(ValueError):
        reparameterize(mu, sigma, np.zeros(3))


def test_reparameterize_affine_in_epsilon():
    rng = np.random.default_rng(1)
    mu, sigma = rng.normal(size=4), rng.uniform(0.1, 2, size=4)
    e1, e2 = rng.normal(size=4), rng.normal(size=4)
    lhs = reparameterize(mu, sigma, e1) + reparameterize(mu, sigma, e2) - reparameterize(mu, sigma, 0 * e1)
    np.testing.assert_allclose(lhs, reparameterize(mu, sigma, e1 + e2), rtol=0, atol=1e-15)


def test_reparameterize_moments():
    n = 100_000
    mu, sigma = np.array([0.5, -2.0]), np.array([0.3, 1.7])
    z = reparameterize(np.tile(mu, (n, 1)), np.tile(sigma, (n, 1)),
                       np.random.default_rng(2).standard_normal((n, 2)))
    se_mean = z.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(z.mean(axis=0) - mu) <= 4 * se_mean)
    # var of the sample variance for a Gaussian is 2 s^4 / (n - 1)
    se_var = np.sqrt(2 * sigma**4 / (n - 1))
    assert np.all(np.abs(z.var(axis=0, ddof=1) - sigma**2) <= 4 * se_var)


def test_kl_examples():
    assert kl_diag_gaussian(np.zeros(3), np.ones(3)) == 0.0
    assert kl_diag_gaussian([1.0], [1.0]) == pytest.approx(0.5, abs=1e-15)
    rng = np.random.default_rng(3)
    assert np.all(kl_diag_gaussian(rng.normal(size=(50, 4)), rng.uniform(0.01, 5, size=(50, 4))) >= 0)
    with pytest.raises(ValueError):
        kl_diag_gaussian([0.0], [0.0])


def test_kl_matches_monte_carlo():
    mu, sigma = np.array([0.7, -0.3]), np.array([0.5, 1.8])
    n = 1_000_000
    z = mu + sigma * np.random.default_rng(4).standard_normal((n, 2))
    log_q = np.sum(-0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma), axis=1)
    log_p = np.sum(-0.5 * z**2, axis=1)
    diff = log_q - log_p
    se = diff.std(ddof=1) / math.sqrt(n)
    assert abs(diff.mean() - kl_diag_gaussian(mu, sigma)) <= 3 * se


def test_elbo_beta_zero_and_perfect_reconstruction():
    model = small_model(fixed=0.6)
    x = np.random.default_rng(5).normal(size=(4, 3))
    eps = np.random.default_rng(6).normal(size=(4, 2))
    r = elbo(model, x, 0.0, eps)
    assert r.elbo == r.reconstruction_term
    # decoder outputs x exactly when mu = 0, sigma = 1, eps = 0
    enc = DenseNetwork([Layer(np.zeros((1, 2)), [0.0], "identity")])
    dec = DenseNetwork([Layer(np.zeros((2, 1)), [0.25, -0.5], "identity")])
    perfect = VaeModel(enc, dec, fixed_sigma_phi=1.0)
    r = elbo(perfect, [0.25, -0.5], 1.0, [0.0])
    s2 = DEFAULT_LIKELIHOOD_SCALE**2
    assert r.elbo == pytest.approx(-math.log(2 * math.pi * s2), abs=1e-12)
    assert r.kl_term == 0.0


def test_elbo_hand_built_linear_model():
    a, b, c, d, s, scale = 0.8, 0.1, 1.5, -0.2, 0.4, 0.3
    model = linear_model(a, b, c, d, s, scale)
    x, eps, beta = 0.7, 0.3, 2.0
    mu = a * x + b
    z = mu + s * eps
    x_hat = c * z + d
    rec = -((x - x_hat) ** 2) / (2 * scale**2) - 0.5 * math.log(2 * math.pi * scale**2)
    kl = 0.5 * (s**2 + mu**2 - 1 - math.log(s**2))
    r = elbo(model, [x], beta, [eps])
    assert r.reconstruction_term == pytest.approx(rec, abs=1e-10)
    assert r.kl_term == pytest.approx(kl, abs=1e-10)
    assert r.elbo == pytest.approx(rec - beta * kl, abs=1e-10)
    assert ElboReport(1.0, 0.5, 4.0).elbo == -1.0


@pytest.mark.parametrize("fixed", [None, 0.3])
def test_elbo_gradients_match_finite_differences(fixed):
    model = small_model(seed=7, fixed=fixed)
    rng = np.random.default_rng(8)
    x = rng.normal(scale=0.5, size=(5, 3))
    eps = rng.normal(size=(5, 2))
    beta = 1.7
    _, grads = elbo_gradients(model, x, beta, eps)
    h = 1e-5
    for net, g in zip(model.networks(), grads):
        flat = net.flat_params()
        analytic = np.concatenate([p.ravel() for p in g])
        fd = np.empty_like(flat)
        for i in range(flat.size):
            e = np.zeros_like(flat)
            e[i] = h
            net.set_flat_params(flat + e)
            up = elbo(model, x, beta, eps).elbo
            net.set_flat_params(flat - e)
            down = elbo(model, x, beta, eps).elbo
            fd[i] = (up - down) / (2 * h)
        net.set_flat_params(flat)
        rel = np.abs(analytic - fd) / np.maximum(1e-6, np.abs(analytic) + np.abs(fd))
        assert rel.max() <= 1e-4


def test_add_input_noise():
    rng = np.random.default_rng(9)
    x = np.array([[0.2, -0.4, 1.0]])
    assert np.array_equal(add_input_noise(x, 0.0, rng), x)
    n = 100_000
    noisy = add_input_noise(np.tile(x, (n, 1)), 0.5, rng)
    assert noisy.shape == (n, 3)
    se = 0.5 / math.sqrt(n)
    assert np.all(np.abs(noisy.mean(axis=0) - x[0]) <= 4 * se)
    assert np.all(np.abs(noisy.var(axis=0, ddof=1) - 0.25) <= 4 * math.sqrt(2 * 0.5**4 / (n - 1)))
    with pytest.raises(ValueError):
        add_input_noise(x, -1.0, rng)


def test_train_improves_elbo_and_reconstructs():
    x = sinc_data()
    model = VaeModel.create(1, 1, hidden=(32, 32), seed=0, likelihood_scale=0.1)
    result = train(model, x, TrainConfig(epochs=200, batch_size=16, seed=0, learning_rate=3e-3))
    assert result.log[-1].elbo > result.log[0].elbo
    assert len(result.log) == 200
    assert all(r.kl_term >= 0 for r in result.log)
    mse = np.mean((reconstruct(model, x) - x) ** 2)
    assert mse < np.var(x)


def test_train_is_deterministic_and_honours_fixed_scale():
    x = sinc_data(32)
    runs = []
    for _ in range(2):
        model = VaeModel.create(1, 1, hidden=(8,), seed=3)
        train(model, x, TrainConfig(epochs=5, batch_size=8, seed=11, input_noise_sigma=0.3,
                                    fixed_sigma_phi=0.5))
        runs.append(model)
    assert runs[0] == runs[1]
    assert runs[0].encoder_scale is None
    np.testing.assert_array_equal(encode(runs[0], x)[1], 0.5)


def test_train_rejects_bad_inputs():
    model = small_model()
    with pytest.raises(ValueError):
        train(model, np.zeros((0, 3)), TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(model, np.zeros((4, 2)), TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        TrainConfig(beta=-1)
    with pytest.raises(ValueError):
        TrainConfig(input_noise_sigma=-0.1)


def test_reconstruct_deterministic_and_constant_decoder():
    model = constant_decoder_model(np.array([0.3, -0.6]))
    x = np.random.default_rng(10).normal(size=(6, 2))
    out = reconstruct(model, x)
    np.testing.assert_array_equal(out, reconstruct(model, x))
    np.testing.assert_array_equal(out, np.tile([0.3, -0.6], (6, 1)))


def test_bias_variance_constant_decoder():
    c = np.array([0.3, -0.6])
    x = np.array([1.0, 0.5])
    bv = bias_variance_likelihood(constant_decoder_model(c), x, 100, seed=0)
    # only the rounding of the sample mean survives
    assert bv.variance <= 1e-28
    assert bv.bias_sq == pytest.approx(float(np.sum((c - x) ** 2)), abs=1e-14)
    with pytest.raises(ValueError):
        bias_variance_likelihood(constant_decoder_model(c), x, 1, seed=0)


def test_bias_variance_linear_decoder_closed_form():
    A = np.array([[1.0, -2.0], [0.5, 0.3], [0.0, 1.2]])
    sigma = np.array([0.4, 0.9])
    enc = DenseNetwork([Layer(np.ones((2, 3)) * 0.1, [0.2, -0.1], "identity")])
    dec = DenseNetwork([Layer(A, np.zeros(3), "identity")])
    model = VaeModel(enc, dec, fixed_sigma_phi=sigma)
    bv = bias_variance_likelihood(model, np.array([0.1, 0.2, -0.3]), 200_000, seed=1)
    exact = float(np.sum(A**2 * sigma**2))
    assert abs(bv.variance - exact) <= 4 * bv.variance_se
    np.testing.assert_array_less(np.abs(bv.per_dim_variance - (A**2) @ sigma**2), 4 * bv.per_dim_variance_se)


def test_bias_variance_sum_matches_expected_error():
    model = small_model(seed=12, fixed=None)
    x = np.array([0.4, -0.2, 0.9])
    bv = bias_variance_likelihood(model, x, 50_000, seed=2)
    se = math.hypot(bv.expected_sq_error_se, bv.bias_sq_se + bv.variance_se)
    assert abs(bv.bias_sq + bv.variance - bv.expected_sq_error) <= 3 * se


def test_decoder_hermite_variance_linear_and_constant():
    A = np.array([[1.0, -2.0], [0.5, 0.3]])
    enc = DenseNetwork([Layer(np.eye(2) * 0.5, [0.2, -0.1], "identity")])
    model = VaeModel(enc, DenseNetwork([Layer(A, [0.1, 0.0], "identity")]), fixed_sigma_phi=[0.4, 0.9])
    decomps = decoder_hermite_variance(model, np.array([0.3, 0.1]), 4)
    profile = degree_profile(decomps)
    assert profile[1] == pytest.approx(float(np.sum(A**2 * np.array([0.16, 0.81]))), rel=1e-10)
    assert all(abs(v) < 1e-12 for k, v in profile.items() if k != 1)

    flat = constant_decoder_model(np.array([0.3, -0.6]))
    for vd in decoder_hermite_variance(flat, np.array([0.1, 0.2]), 4):
        assert np.all(np.abs(np.array(list(vd.contributions.values()))) < 1e-14)


def test_decoder_hermite_variance_matches_monte_carlo():
    model = small_model(seed=13, data_dim=3, latent_dim=2)
    x = np.array([0.5, -0.3, 0.2])
    decomps = decoder_hermite_variance(model, x, 10, EstimatorConfig(method="quadrature", nodes=48))
    bv = bias_variance_likelihood(model, x, 200_000, seed=3)
    totals = np.array([vd.total for vd in decomps])
    assert np.all(np.abs(totals - bv.per_dim_variance) <= 3 * bv.per_dim_variance_se)


def test_decoder_hermite_variance_budget():
    model = VaeModel.create(2, 8, hidden=(4,), fixed_sigma_phi=0.5)
    with pytest.raises(ValueError):
        decoder_hermite_variance(model, np.zeros(2), 10)
