"""Gaussian VAE with dense encoder/decoder networks.

The model is q(z|x) = N(mu(x), diag sigma(x)^2), p(z) = N(0, I) and
p(x|z) = N(g(z), sigma_theta^2 I).  The encoder scale is either learned by its
own network (through a clamped exponential) or pinned to a constant vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, DenseNetwork, GradientTape, adam_step
from .measure import (
    EstimatorConfig,
    GaussianMeasure,
    VarianceDecomposition,
    count_multi_indices,
    variance_decompositions,
)

DEFAULT_LIKELIHOOD_SCALE = math.sqrt(0.1)
SCALE_MIN, SCALE_MAX = 1e-4, 1e2
_LOG_SCALE_MIN, _LOG_SCALE_MAX = math.log(SCALE_MIN), math.log(SCALE_MAX)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class VaeModel:
    encoder_mean: DenseNetwork
    decoder: DenseNetwork
    encoder_scale: DenseNetwork | None = None
    fixed_sigma_phi: np.ndarray | None = None
    likelihood_scale: float = DEFAULT_LIKELIHOOD_SCALE

    def __post_init__(self):
        if (self.encoder_scale is None) == (self.fixed_sigma_phi is None):
            raise ValueError("exactly one of encoder_scale and fixed_sigma_phi must be given")
        if self.fixed_sigma_phi is not None:
            sp = np.broadcast_to(np.asarray(self.fixed_sigma_phi, dtype=float), (self.latent_dim,)).copy()
            if not np.all(sp > 0):
                raise ValueError("fixed sigma_phi entries must be positive")
            self.fixed_sigma_phi = sp
        if self.likelihood_scale <= 0:
            raise ValueError("likelihood scale must be positive")
        if self.decoder.in_dim != self.latent_dim or self.decoder.out_dim != self.data_dim:
            raise ValueError("decoder does not chain with the encoder dimensions")
        if self.encoder_scale is not None and (
            self.encoder_scale.in_dim != self.data_dim or self.encoder_scale.out_dim != self.latent_dim
        ):
            raise ValueError("encoder scale network has the wrong shape")

    @property
    def latent_dim(self) -> int:
        return self.encoder_mean.out_dim

    @property
    def data_dim(self) -> int:
        return self.encoder_mean.in_dim

    @property
    def fixed_mode(self) -> bool:
        return self.fixed_sigma_phi is not None

    def networks(self) -> list[DenseNetwork]:
        nets = [self.encoder_mean, self.decoder]
        if self.encoder_scale is not None:
            nets.append(self.encoder_scale)
        return nets

    @classmethod
    def create(
        cls,
        data_dim: int,
        latent_dim: int,
        hidden: tuple[int, ...] = (256, 256, 256),
        activation: str = "sigmoid",
        fixed_sigma_phi=None,
        likelihood_scale: float = DEFAULT_LIKELIHOOD_SCALE,
        seed: int = 0,
    ) -> "VaeModel":
        rng = np.random.default_rng(seed)
        enc = DenseNetwork.init([data_dim, *hidden, latent_dim], activation, rng)
        dec = DenseNetwork.init([latent_dim, *hidden, data_dim], activation, rng)
        scale_net = None
        if fixed_sigma_phi is None:
            scale_net = DenseNetwork.init([data_dim, *hidden, latent_dim], activation, rng)
        return cls(enc, dec, scale_net, fixed_sigma_phi, likelihood_scale)

    def copy(self) -> "VaeModel":
        return VaeModel(
            self.encoder_mean.copy(),
            self.decoder.copy(),
            None if self.encoder_scale is None else self.encoder_scale.copy(),
            None if self.fixed_sigma_phi is None else self.fixed_sigma_phi.copy(),
            self.likelihood_scale,
        )

    def __eq__(self, other):
        if not isinstance(other, VaeModel):
            return NotImplemented
        return (
            self.encoder_mean == other.encoder_mean
            and self.decoder == other.decoder
            and (self.encoder_scale == other.encoder_scale)
            and (
                (self.fixed_sigma_phi is None and other.fixed_sigma_phi is None)
                or (
                    self.fixed_sigma_phi is not None
                    and other.fixed_sigma_phi is not None
                    and np.array_equal(self.fixed_sigma_phi, other.fixed_sigma_phi)
                )
            )
            and self.likelihood_scale == other.likelihood_scale
        )


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 1.0
    input_noise_sigma: float = 0.0
    epochs: int = 200
    batch_size: int = 256
    seed: int = 0
    learning_rate: float = 1e-3
    fixed_sigma_phi: tuple[float, ...] | float | None = None

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.input_noise_sigma < 0:
            raise ValueError("input noise sigma must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class ElboReport:
    reconstruction_term: float
    kl_term: float
    beta: float = 1.0

    @property
    def elbo(self) -> float:
        return self.reconstruction_term - self.beta * self.kl_term


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite activations")


def _scale_from_raw(raw: np.ndarray) -> np.ndarray:
    return np.exp(np.clip(raw, _LOG_SCALE_MIN, _LOG_SCALE_MAX))


def encode(model: VaeModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and standard deviation; x may be (d,) or (B, d)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.data_dim:
        raise ValueError(f"input dimension {x.shape[-1]} != data dimension {model.data_dim}")
    mu = model.encoder_mean(x)
    if model.fixed_mode:
        sigma = np.broadcast_to(model.fixed_sigma_phi, mu.shape).copy()
    else:
        sigma = _scale_from_raw(model.encoder_scale(x))
    _check_finite(mu, sigma)
    return mu, sigma


def reparameterize(mu, sigma, epsilon) -> np.ndarray:
    mu, sigma, epsilon = (np.asarray(a, dtype=float) for a in (mu, sigma, epsilon))
    if mu.shape != sigma.shape or mu.shape != epsilon.shape:
        raise ValueError(f"shape mismatch: {mu.shape}, {sigma.shape}, {epsilon.shape}")
    return mu + sigma * epsilon


def kl_diag_gaussian(mu, sigma):
    """KL(N(mu, diag sigma^2) || N(0, I)); sums over the last axis."""
    mu, sigma = np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    s2 = sigma * sigma
    kl = 0.5 * np.sum(s2 + mu * mu - 1.0 - np.log(s2), axis=-1)
    # rounding can leave tiny negatives at the optimum
    return np.maximum(kl, 0.0)


def log_likelihood(x, x_hat, likelihood_scale: float):
    """log N(x | x_hat, likelihood_scale^2 I), summed over the last axis."""
    x, x_hat = np.asarray(x, dtype=float), np.asarray(x_hat, dtype=float)
    d = x.shape[-1]
    s2 = likelihood_scale**2
    return -0.5 / s2 * np.sum((x - x_hat) ** 2, axis=-1) - 0.5 * d * math.log(2 * math.pi * s2)


def _elbo_graph(model: VaeModel, tape: GradientTape, x: np.ndarray, x_in: np.ndarray,
                beta: float, epsilon: np.ndarray):
    """Record the batch-mean reconstruction and KL terms on ``tape``."""
    x_node = tape.constant(x_in)
    mu = model.encoder_mean.apply(tape, x_node)
    if model.fixed_mode:
        sigma = tape.constant(np.broadcast_to(model.fixed_sigma_phi, mu.shape))
        log_sigma = tape.constant(np.log(sigma.value))
    else:
        log_sigma = ad.clip(model.encoder_scale.apply(tape, x_node), _LOG_SCALE_MIN, _LOG_SCALE_MAX)
        sigma = ad.exp(log_sigma)
    z = mu + sigma * tape.constant(epsilon)
    x_hat = model.decoder.apply(tape, z)
    s2 = model.likelihood_scale**2
    batch, d = x.shape
    sq = ad.sum_((x_hat - tape.constant(x)) ** 2)
    rec = ad.mul(sq, -0.5 / s2 / batch) + (-0.5 * d * math.log(2 * math.pi * s2))
    kl_terms = sigma**2 + mu**2 - 1.0 - log_sigma * 2.0
    kl = ad.mul(ad.sum_(kl_terms), 0.5 / batch)
    return rec, kl


def elbo(model: VaeModel, x, beta: float, epsilon) -> ElboReport:
    """Single-sample ELBO with the given epsilon, averaged over a batch."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    epsilon = np.atleast_2d(np.asarray(epsilon, dtype=float))
    mu, sigma = encode(model, x)
    z = reparameterize(mu, sigma, epsilon)
    x_hat = model.decoder(z)
    rec = float(np.mean(log_likelihood(x, x_hat, model.likelihood_scale)))
    kl = float(np.mean(kl_diag_gaussian(mu, sigma)))
    if not (math.isfinite(rec) and math.isfinite(kl)):
        raise FloatingPointError("non-finite ELBO")
    return ElboReport(rec, kl, beta)


def elbo_gradients(model: VaeModel, x, beta: float, epsilon, x_in=None):
    """ELBO report plus gradients of the ELBO for every network of the model.

    ``x_in`` is what the encoder sees (a noised copy of ``x``); defaults to ``x``.
    Returns (report, {net_id: [grads]}) in the order of ``model.networks()``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x_in = x if x_in is None else np.atleast_2d(np.asarray(x_in, dtype=float))
    epsilon = np.atleast_2d(np.asarray(epsilon, dtype=float))
    tape = GradientTape()
    rec, kl = _elbo_graph(model, tape, x, x_in, beta, epsilon)
    objective = rec - kl * beta
    grads = tape.gradients(objective)
    report = ElboReport(float(rec.value), float(kl.value), beta)
    return report, [tape.network_gradients(grads, net) for net in model.networks()]


def add_input_noise(x, sigma: float, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    if sigma == 0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape)


@dataclass
class TrainResult:
    model: VaeModel
    log: list[ElboReport] = field(default_factory=list)


def train(model: VaeModel, data, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    """Maximize the single-sample Monte Carlo ELBO with Adam; mutates ``model``.

    ``on_epoch(epoch, report)`` is called after every epoch if given.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    if data.shape[1] != model.data_dim:
        raise ValueError("dataset dimension does not match the model")
    if cfg.fixed_sigma_phi is not None:
        model.fixed_sigma_phi = np.broadcast_to(
            np.asarray(cfg.fixed_sigma_phi, dtype=float), (model.latent_dim,)
        ).copy()
        model.encoder_scale = None
        model.__post_init__()
    rng = np.random.default_rng(cfg.seed)
    nets = model.networks()
    states = [AdamState.zeros_like(net.params(), lr=cfg.learning_rate) for net in nets]
    n = data.shape[0]
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        rec_sum = kl_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            x_in = add_input_noise(batch, cfg.input_noise_sigma, rng)
            eps = rng.standard_normal((batch.shape[0], model.latent_dim))
            report, grads = elbo_gradients(model, batch, cfg.beta, eps, x_in)
            if not (math.isfinite(report.reconstruction_term) and math.isfinite(report.kl_term)):
                raise TrainingDiverged(epoch)
            for net, g, state in zip(nets, grads, states):
                # ascend the ELBO
                new, _ = adam_step(net.params(), [-gi for gi in g], state)
                net.set_params(new)
            rec_sum += report.reconstruction_term * batch.shape[0]
            kl_sum += report.kl_term * batch.shape[0]
        history.append(ElboReport(rec_sum / n, kl_sum / n, cfg.beta))
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return TrainResult(model, history)


def reconstruct(model: VaeModel, x) -> np.ndarray:
    """Deterministic reconstruction g(mu(x))."""
    return model.decoder(encode(model, x)[0])


@dataclass(frozen=True)
class BiasVariance:
    bias_sq: float
    variance: float
    bias_sq_se: float
    variance_se: float
    per_dim_variance: np.ndarray
    per_dim_variance_se: np.ndarray
    expected_sq_error: float
    expected_sq_error_se: float


def bias_variance_likelihood(model: VaeModel, x, n_samples: int, seed: int) -> BiasVariance:
    """Monte Carlo split of E_q||g(z) - x||^2 into squared bias and variance."""
    if n_samples < 2:
        raise ValueError("need at least two samples")
    x = np.asarray(x, dtype=float)
    mu, sigma = encode(model, x)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_samples, model.latent_dim))
    g = model.decoder(mu + sigma * eps)
    g_bar = g.mean(axis=0)
    resid = g - g_bar
    sq = np.sum(resid**2, axis=1) * n_samples / (n_samples - 1)
    per_dim = resid**2 * n_samples / (n_samples - 1)
    bias_vec = g_bar - x
    bias_sq = float(bias_vec @ bias_vec)
    # delta method: d(||b||^2) = 2 b . d(g_bar)
    proj = resid @ (2.0 * bias_vec)
    err = np.sum((g - x) ** 2, axis=1)
    root_n = math.sqrt(n_samples)
    return BiasVariance(
        bias_sq=bias_sq,
        variance=float(sq.mean()),
        bias_sq_se=float(proj.std(ddof=1) / root_n),
        variance_se=float(sq.std(ddof=1) / root_n),
        per_dim_variance=per_dim.mean(axis=0),
        per_dim_variance_se=per_dim.std(axis=0, ddof=1) / root_n,
        expected_sq_error=float(err.mean()),
        expected_sq_error_se=float(err.std(ddof=1) / root_n),
    )


def posterior_measure(model: VaeModel, x) -> GaussianMeasure:
    mu, sigma = encode(model, x)
    return GaussianMeasure(mu, sigma)


def decoder_hermite_variance(
    model: VaeModel, x, max_degree: int, cfg: EstimatorConfig | None = None
) -> list[VarianceDecomposition]:
    """Hermite variance decomposition of each decoder output under q(z|x)."""
    budget = count_multi_indices(model.latent_dim, max_degree)
    if budget > 10_000:
        raise ValueError(f"{budget} multi-indices exceed the enumeration budget of 10000")
    def decoder(z):
        # one-dimensional measures pass a flat vector of scalar latents
        return model.decoder(np.reshape(z, (-1, model.latent_dim)))

    return variance_decompositions(decoder, posterior_measure(model, x), max_degree, cfg)


def degree_profile(decomps: list[VarianceDecomposition]) -> dict[int, float]:
    """Sum of per-|alpha| contributions over all outputs."""
    total: dict[int, float] = {}
    for vd in decomps:
        for k, c in vd.by_degree().items():
            total[k] = total.get(k, 0.0) + c
    return total
