"""Lipschitz bounds for dense networks and the variance check they imply.

The upper bound multiplies layer spectral norms by the activation slopes.  The
lower bound is the largest Jacobian norm seen on a sample of inputs.  For any
L-Lipschitz f and x ~ N(mu, S^2), Var f(x) <= L^2 ||S||_2^2, which
:func:`poincare_check` and :func:`certify_decoder_variance` test numerically.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .autodiff import ACTIVATION_LIPSCHITZ, DenseNetwork, backward, forward
from .measure import GaussianMeasure
from .vae import VaeModel, encode

MAX_ITER = 10_000


class SpectralNormError(ArithmeticError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(f"power iteration did not converge in {iterations} steps (residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


def spectral_norm(W, tol: float = 1e-10, max_iter: int = MAX_ITER) -> float:
    """Largest singular value by power iteration on W^T W from the all-ones vector."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if not np.any(W):
        raise ValueError("spectral norm of a zero matrix is not estimated")
    v = np.ones(W.shape[1]) / math.sqrt(W.shape[1])
    if not np.any(W @ v):
        # all-ones lies in the null space; start from the heaviest row instead
        v = W[np.argmax(np.sum(W * W, axis=1))]
        v = v / np.linalg.norm(v)
    lam = 0.0
    for it in range(1, max_iter + 1):
        w = W.T @ (W @ v)
        lam_new = float(v @ w)
        norm_w = np.linalg.norm(w)
        v = w / norm_w
        if abs(lam_new - lam) <= tol * lam_new:
            return math.sqrt(lam_new)
        lam = lam_new
    residual = float(np.linalg.norm(W.T @ (W @ v) - lam * v) / lam)
    raise SpectralNormError(max_iter, residual)


def lipschitz_upper_bound(net: DenseNetwork, tol: float = 1e-10) -> float:
    """Product of layer spectral norms and activation Lipschitz constants."""
    bound = 1.0
    for layer in net.layers:
        if not np.any(layer.weight):
            return 0.0
        bound *= spectral_norm(layer.weight, tol) * ACTIVATION_LIPSCHITZ[layer.activation]
    return bound


def jacobians(net: DenseNetwork, points) -> np.ndarray:
    """Input Jacobians, shape (B, out, in), one backward pass per output."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    _, tape = forward(net, points)
    rows = []
    for j in range(net.out_dim):
        seed = np.zeros((points.shape[0], net.out_dim))
        seed[:, j] = 1.0
        rows.append(backward(tape, seed).input)
    return np.stack(rows, axis=1)


def empirical_lipschitz(net: DenseNetwork, sample_points=1000, seed: int = 0) -> float:
    """Largest Jacobian spectral norm over ``sample_points``.

    Pass an array of points, or a count to draw that many standard normal inputs.
    """
    if isinstance(sample_points, (int, np.integer)):
        if sample_points < 1:
            raise ValueError("need at least one sample point")
        sample_points = np.random.default_rng(seed).standard_normal((int(sample_points), net.in_dim))
    points = np.atleast_2d(np.asarray(sample_points, dtype=float))
    if points.shape[0] == 0:
        raise ValueError("empty sample set")
    J = jacobians(net, points)
    return float(np.max(np.linalg.norm(J, ord=2, axis=(1, 2))))


@dataclass(frozen=True)
class LipschitzEstimate:
    upper_bound: float
    empirical_lower_bound: float
    method: Literal["norm_product", "gradient_sampling"] = "norm_product"
    sample_count: int = 0

    def __post_init__(self):
        if self.upper_bound < 0 or self.empirical_lower_bound < 0:
            raise ValueError("Lipschitz estimates are non-negative")
        if self.empirical_lower_bound > self.upper_bound * (1 + 1e-9):
            raise ValueError("lower bound exceeds upper bound")


def estimate_lipschitz(net: DenseNetwork, sample_points=1000, seed: int = 0) -> LipschitzEstimate:
    points = sample_points
    if isinstance(points, (int, np.integer)):
        points = np.random.default_rng(seed).standard_normal((int(points), net.in_dim))
    points = np.atleast_2d(points)
    return LipschitzEstimate(lipschitz_upper_bound(net), empirical_lipschitz(net, points),
                             "norm_product", points.shape[0])


def measure_scale_norm(m: GaussianMeasure) -> float:
    """Operator 2-norm of the measure's scale matrix S."""
    if m.full_covariance is None:
        return float(np.max(m.scale))
    return math.sqrt(float(np.max(np.linalg.eigvalsh(m.full_covariance))))


def poincare_check(var_f: float, L: float, m: GaussianMeasure, var_se: float = 0.0) -> tuple[bool, float]:
    """Test Var f <= L^2 ||S||_2^2, allowing 3 standard errors for an estimated variance."""
    if var_f < 0 or L < 0 or var_se < 0:
        raise ValueError("variance, Lipschitz constant and standard error must be non-negative")
    bound = L * L * measure_scale_norm(m) ** 2
    slack = bound - var_f
    return bool(var_f <= bound + 3.0 * var_se), float(slack)


@dataclass
class VarianceCertificate:
    """Per point and output: Monte Carlo decoder variance against L^2 ||sigma||^2."""

    lipschitz: float
    variances: np.ndarray
    std_errors: np.ndarray
    bounds: np.ndarray

    @property
    def violations(self) -> int:
        return int(np.sum(self.variances > self.bounds + 3.0 * self.std_errors))

    @property
    def var_max(self) -> float:
        return float(self.variances.max())

    @property
    def slack_min(self) -> float:
        return float((self.bounds - self.variances).min())


def certify_decoder_variance(model: VaeModel, x, n_samples: int = 10_000, seed: int = 0,
                             lipschitz: float | None = None) -> VarianceCertificate:
    """Check the variance bound for every row of ``x`` and every decoder output.

    Each point gets its own generator seeded by (seed, index) so results do not
    depend on how the dataset is chunked.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    L = lipschitz_upper_bound(model.decoder) if lipschitz is None else lipschitz
    mu, sigma = encode(model, x)
    variances = np.empty((x.shape[0], model.data_dim))
    errors = np.empty_like(variances)
    for i in range(x.shape[0]):
        eps = np.random.default_rng([seed, i]).standard_normal((n_samples, model.latent_dim))
        g = model.decoder(mu[i] + sigma[i] * eps)
        dev = (g - g.mean(axis=0)) ** 2 * n_samples / (n_samples - 1)
        variances[i] = dev.mean(axis=0)
        errors[i] = dev.std(axis=0, ddof=1) / math.sqrt(n_samples)
    scale_norm = np.max(sigma, axis=1)
    bounds = np.repeat(((L * scale_norm) ** 2)[:, None], model.data_dim, axis=1)
    return VarianceCertificate(L, variances, errors, bounds)


@dataclass(frozen=True)
class LipschitzReportRow:
    network_id: str
    sigma_phi_or_sigma: float
    upper_bound: float
    empirical_lower_bound: float
    var_max: float = float("nan")
    poincare_slack_min: float = float("nan")


def write_lipschitz_report(rows: list[LipschitzReportRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["network_id", "sigma_phi_or_sigma", "upper_bound", "empirical_lower_bound",
                    "var_max", "poincare_slack_min"])
        for r in rows:
            w.writerow([r.network_id, f"{r.sigma_phi_or_sigma:.12g}", f"{r.upper_bound:.12g}",
                        f"{r.empirical_lower_bound:.12g}", f"{r.var_max:.12g}",
                        f"{r.poincare_slack_min:.12g}"])
