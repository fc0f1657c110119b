"""Gaussian measures and their Hermite bases.

A Gaussian space L2(R^n, N(mu, S^2)) has the tensorised probabilists' Hermite
polynomials of the standardized coordinate as an orthogonal basis.  This module
evaluates that basis, estimates Hermite coefficients of arbitrary functions, and
decomposes the variance of a function into per-multi-index contributions
|f_hat(alpha)|^2 / alpha!.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

MAX_EXACT_DEGREE = 20

Estimator = Literal["quadrature", "monte_carlo"]


@dataclass(frozen=True)
class GaussianMeasure:
    """N(mean, diag(scale)^2), or N(mean, full_covariance) when that is given."""

    mean: np.ndarray
    scale: np.ndarray
    full_covariance: np.ndarray | None = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        scale = np.atleast_1d(np.asarray(self.scale, dtype=float))
        if mean.ndim != 1 or mean.size < 1:
            raise ValueError("mean must be a non-empty vector")
        if scale.shape != mean.shape:
            raise ValueError(f"scale shape {scale.shape} != mean shape {mean.shape}")
        if not np.all(scale > 0):
            raise ValueError("scale entries must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        if self.full_covariance is not None:
            cov = np.asarray(self.full_covariance, dtype=float)
            n = mean.size
            if cov.shape != (n, n):
                raise ValueError(f"full_covariance must be {n}x{n}")
            if np.max(np.abs(cov - cov.T)) > 1e-12:
                raise ValueError("full_covariance is not symmetric")
            if np.min(np.linalg.eigvalsh(cov)) <= 0:
                raise ValueError("full_covariance is not positive definite")
            object.__setattr__(self, "full_covariance", cov)

    @classmethod
    def standard(cls, n: int = 1) -> "GaussianMeasure":
        return cls(np.zeros(n), np.ones(n))

    @classmethod
    def from_covariance(cls, mean, cov) -> "GaussianMeasure":
        cov = np.asarray(cov, dtype=float)
        return cls(mean, np.sqrt(np.diag(cov)), full_covariance=cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, n_samples: int, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal((n_samples, self.dim))
        return self.from_standard(eps)

    def from_standard(self, x_hat: np.ndarray) -> np.ndarray:
        """Inverse of :func:`standardize`; maps N(0, I) points onto this measure."""
        x_hat = np.asarray(x_hat, dtype=float)
        if self.full_covariance is None:
            return x_hat * self.scale + self.mean
        O, D = whiten(self.full_covariance)
        return x_hat @ (np.sqrt(np.diag(D))[:, None] * O) + self.mean


@dataclass(frozen=True, order=True)
class MultiIndex:
    degrees: tuple[int, ...]

    def __post_init__(self):
        degrees = tuple(int(a) for a in self.degrees)
        if not degrees:
            raise ValueError("multi-index must have at least one entry")
        if any(a < 0 for a in degrees):
            raise ValueError("multi-index degrees must be non-negative")
        object.__setattr__(self, "degrees", degrees)

    def __len__(self) -> int:
        return len(self.degrees)

    def __iter__(self):
        return iter(self.degrees)

    def total_degree(self) -> int:
        return sum(self.degrees)

    def factorial(self) -> int:
        if self.total_degree() > MAX_EXACT_DEGREE:
            raise ValueError(
                f"|alpha| = {self.total_degree()} exceeds exact factorial limit {MAX_EXACT_DEGREE}"
            )
        return math.prod(math.factorial(a) for a in self.degrees)

    def label(self) -> str:
        return ";".join(str(a) for a in self.degrees)


def _as_multi_index(alpha) -> MultiIndex:
    if isinstance(alpha, MultiIndex):
        return alpha
    if isinstance(alpha, (int, np.integer)):
        return MultiIndex((int(alpha),))
    return MultiIndex(tuple(alpha))


@dataclass(frozen=True)
class EstimatorConfig:
    """How Hermite coefficients are estimated.

    ``method=None`` picks quadrature for n <= 2 and Monte Carlo otherwise.
    """

    method: Estimator | None = None
    nodes: int = 64
    samples: int = 100_000
    seed: int = 0

    def resolve(self, n: int) -> Estimator:
        method = self.method or ("quadrature" if n <= 2 else "monte_carlo")
        if method == "quadrature":
            if self.nodes < 1:
                raise ValueError("quadrature needs at least one node")
            if n > 4:
                raise ValueError(f"tensor quadrature refused for n={n} > 4")
        elif method == "monte_carlo":
            if self.samples < 2:
                raise ValueError("Monte Carlo needs at least two samples")
        else:
            raise ValueError(f"unknown estimator {method!r}")
        return method


@dataclass(frozen=True)
class CoefficientEstimate:
    value: float
    std_error: float
    estimator: Estimator
    samples_or_nodes: int


@dataclass
class VarianceDecomposition:
    contributions: dict[MultiIndex, float]
    truncation_degree: int
    std_errors: dict[MultiIndex, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(sum(self.contributions.values()))

    def by_degree(self) -> dict[int, float]:
        """Contributions aggregated by total degree |alpha|."""
        profile = {k: 0.0 for k in range(1, self.truncation_degree + 1)}
        for alpha, c in self.contributions.items():
            profile[alpha.total_degree()] += c
        return profile

    def high_degree_fraction(self, min_degree: int = 2) -> float:
        total = self.total
        if total <= 0:
            return 0.0
        high = sum(c for a, c in self.contributions.items() if a.total_degree() >= min_degree)
        return high / total

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["alpha", "contribution", "std_error"])
            for alpha, c in self.contributions.items():
                se = self.std_errors.get(alpha, 0.0)
                writer.writerow([alpha.label(), f"{c:.12g}", f"{se:.12g}"])

    @classmethod
    def from_csv(cls, path) -> "VarianceDecomposition":
        contributions, errors = {}, {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                alpha = MultiIndex(tuple(int(a) for a in row["alpha"].split(";")))
                contributions[alpha] = float(row["contribution"])
                errors[alpha] = float(row["std_error"])
        degree = max((a.total_degree() for a in contributions), default=1)
        return cls(contributions, degree, errors)


def standardize(x, m: GaussianMeasure) -> np.ndarray:
    """Map points of N(mu, S^2) (or N(mu, C)) to the standard measure.

    Accepts a single vector of length n or a batch of shape (N, n).
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != m.dim:
        raise ValueError(f"point dimension {x.shape[-1]} != measure dimension {m.dim}")
    if m.full_covariance is None:
        return (x - m.mean) / m.scale
    O, D = whiten(m.full_covariance)
    return (x - m.mean) @ O.T / np.sqrt(np.diag(D))


def hermite_eval(k: int, t):
    """Probabilists' Hermite polynomial H_k(t) via the three-term recurrence."""
    if k < 0:
        raise ValueError("degree must be non-negative")
    t = np.asarray(t, dtype=float)
    h_prev = np.ones_like(t)
    if k == 0:
        return h_prev if h_prev.ndim else float(h_prev)
    h = t.copy()
    for j in range(1, k):
        h_prev, h = h, t * h - j * h_prev
    return h if h.ndim else float(h)


def hermite_table(max_degree: int, t) -> np.ndarray:
    """All of H_0..H_max_degree at ``t``; shape (max_degree + 1, *t.shape)."""
    t = np.asarray(t, dtype=float)
    table = np.empty((max_degree + 1,) + t.shape)
    table[0] = 1.0
    if max_degree >= 1:
        table[1] = t
    for j in range(1, max_degree):
        table[j + 1] = t * table[j] - j * table[j - 1]
    return table


def hermite_eval_general(k: int, x, mu: float, sigma: float):
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return hermite_eval(k, (np.asarray(x, dtype=float) - mu) / sigma)


def hermite_eval_multi(alpha, x, m: GaussianMeasure):
    alpha = _as_multi_index(alpha)
    if len(alpha) != m.dim:
        raise ValueError(f"multi-index length {len(alpha)} != measure dimension {m.dim}")
    x_hat = standardize(x, m)
    out = np.ones(x_hat.shape[:-1])
    for i, a in enumerate(alpha):
        if a:
            out = out * hermite_eval(a, x_hat[..., i])
    return out if out.ndim else float(out)


def gauss_hermite_rule(n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes/weights integrating against the standard normal density.

    Physicists' rule for exp(-t^2) rescaled: x = sqrt(2) t, w -> w / sqrt(pi).
    """
    t, w = np.polynomial.hermite.hermgauss(n_nodes)
    return np.sqrt(2.0) * t, w / np.sqrt(np.pi)


def tensor_rule(n: int, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = gauss_hermite_rule(n_nodes)
    grids = np.meshgrid(*([x] * n), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    wgrids = np.meshgrid(*([w] * n), indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    return nodes, weights


def _evaluate(f: Callable, x: np.ndarray) -> np.ndarray:
    """Evaluate ``f`` on a batch (N, n) as an (N, k) array; loops for scalar-only f."""
    try:
        y = np.asarray(f(x), dtype=float)
        if y.shape == (x.shape[0],):
            return y[:, None]
        if y.ndim == 2 and y.shape[0] == x.shape[0]:
            return y
    except (TypeError, ValueError):
        pass
    return np.array([np.atleast_1d(np.asarray(f(row), dtype=float)) for row in x])


def _as_vector_function(f: Callable, n: int) -> Callable:
    # one-dimensional callers usually write f(x) for scalar x
    if n == 1:
        return lambda X: f(X[:, 0])
    return f


class _Design:
    """Points x_hat ~ N(0, I) with weights, and f evaluated at the mapped points."""

    def __init__(self, f, m: GaussianMeasure, cfg: EstimatorConfig):
        self.method = cfg.resolve(m.dim)
        if self.method == "quadrature":
            self.x_hat, self.weights = tensor_rule(m.dim, cfg.nodes)
            self.count = cfg.nodes
        else:
            rng = np.random.default_rng(cfg.seed)
            self.x_hat = rng.standard_normal((cfg.samples, m.dim))
            self.weights = None
            self.count = cfg.samples
        self.values = _evaluate(_as_vector_function(f, m.dim), m.from_standard(self.x_hat))
        self._tables = [hermite_table(0, self.x_hat[:, i]) for i in range(m.dim)]

    def basis(self, alpha: MultiIndex) -> np.ndarray:
        for i, a in enumerate(alpha):
            if a >= len(self._tables[i]):
                self._tables[i] = hermite_table(max(a, 2 * len(self._tables[i])), self.x_hat[:, i])
        out = np.ones(self.x_hat.shape[0])
        for i, a in enumerate(alpha):
            if a:
                out = out * self._tables[i][a]
        return out

    def coefficients(self, alpha: MultiIndex) -> tuple[np.ndarray, np.ndarray]:
        """Estimates and standard errors of f_hat(alpha), one per output of f."""
        prod = self.values * self.basis(alpha)[:, None]
        if self.method == "quadrature":
            return self.weights @ prod, np.zeros(prod.shape[1])
        n = prod.shape[0]
        return prod.mean(axis=0), prod.std(axis=0, ddof=1) / np.sqrt(n)

    def coefficient(self, alpha: MultiIndex, output: int = 0) -> CoefficientEstimate:
        value, se = self.coefficients(alpha)
        return CoefficientEstimate(float(value[output]), float(se[output]), self.method, self.count)

    def decompositions(self, max_degree: int) -> list[VarianceDecomposition]:
        if max_degree < 1:
            raise ValueError("max_degree must be >= 1")
        if max_degree > MAX_EXACT_DEGREE:
            raise ValueError(f"max_degree {max_degree} exceeds {MAX_EXACT_DEGREE}")
        k = self.values.shape[1]
        out = [VarianceDecomposition({}, max_degree, {}) for _ in range(k)]
        for alpha in enumerate_multi_indices(self.x_hat.shape[1], max_degree)[1:]:
            value, se = self.coefficients(alpha)
            fact = alpha.factorial()
            for i in range(k):
                out[i].contributions[alpha] = float(value[i] ** 2 / fact)
                # delta method on c^2
                out[i].std_errors[alpha] = float(2.0 * abs(value[i]) * se[i] / fact)
        return out


def hermite_coefficient(
    f: Callable, alpha, m: GaussianMeasure, cfg: EstimatorConfig | None = None
) -> CoefficientEstimate:
    """Estimate f_hat(alpha) = E[f(x) H_alpha(x_hat)] under ``m``.

    ``f`` receives a batch of points of shape (N, n); for n == 1 it receives a
    flat array of length N instead.
    """
    alpha = _as_multi_index(alpha)
    if len(alpha) != m.dim:
        raise ValueError(f"multi-index length {len(alpha)} != measure dimension {m.dim}")
    return _Design(f, m, cfg or EstimatorConfig()).coefficient(alpha)


def variance_decomposition(
    f: Callable, m: GaussianMeasure, max_degree: int, cfg: EstimatorConfig | None = None
) -> VarianceDecomposition:
    """Var(f) split as |f_hat(alpha)|^2 / alpha! for 1 <= |alpha| <= max_degree.

    Only evaluations of f are needed, so non-smooth f (relu nets) are fine.
    """
    return _Design(f, m, cfg or EstimatorConfig()).decompositions(max_degree)[0]


def variance_decompositions(
    f: Callable, m: GaussianMeasure, max_degree: int, cfg: EstimatorConfig | None = None
) -> list[VarianceDecomposition]:
    """One decomposition per output of a vector-valued ``f`` (returns (N, k))."""
    return _Design(f, m, cfg or EstimatorConfig()).decompositions(max_degree)


def gaussian_measure_fourier(m: GaussianMeasure, omega) -> complex | np.ndarray:
    """Characteristic-function transform exp(-i w.mu - |S w|^2 / 2).

    ``omega`` may be a single frequency vector or a batch (N, n).
    """
    omega = np.asarray(omega, dtype=float)
    if omega.ndim == 0:
        omega = omega[None]
    if omega.shape[-1] != m.dim:
        raise ValueError(f"frequency dimension {omega.shape[-1]} != measure dimension {m.dim}")
    if m.full_covariance is None:
        quad = np.sum((omega * m.scale) ** 2, axis=-1)
    else:
        quad = np.einsum("...i,ij,...j->...", omega, m.full_covariance, omega)
    out = np.exp(-1j * (omega @ m.mean) - 0.5 * quad)
    return out if out.ndim else complex(out)


def whiten(C) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal O and diagonal D with O C O^T = D, eigenvalues descending."""
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("covariance must be square")
    evals, evecs = np.linalg.eigh(0.5 * (C + C.T))
    if np.min(evals) <= 0:
        raise ValueError(f"covariance not positive definite (min eigenvalue {np.min(evals):.3g})")
    order = np.argsort(evals)[::-1]
    return evecs[:, order].T, np.diag(evals[order])


def enumerate_multi_indices(n: int, max_total_degree: int) -> list[MultiIndex]:
    """All alpha in N^n with |alpha| <= max_total_degree, graded lexicographic."""
    if n < 1:
        raise ValueError("dimension must be >= 1")
    out = []
    for total in range(max_total_degree + 1):
        out.extend(
            MultiIndex(c) for c in itertools.product(range(total + 1), repeat=n) if sum(c) == total
        )
    return out


def count_multi_indices(n: int, max_total_degree: int) -> int:
    return math.comb(n + max_total_degree, max_total_degree)


def monte_carlo_variance(
    f: Callable, m: GaussianMeasure, n_samples: int, seed: int
) -> tuple[float, float]:
    """Sample variance of f under m and its standard error."""
    rng = np.random.default_rng(seed)
    y = _evaluate(_as_vector_function(f, m.dim), m.sample(n_samples, rng))[:, 0]
    return _variance_with_error(y)


def _variance_with_error(y: np.ndarray) -> tuple[float, float]:
    n = y.size
    centred = y - y.mean()
    var = float(centred @ centred / (n - 1))
    m4 = float(np.mean(centred**4))
    se = float(np.sqrt(max(m4 - var**2 * (n - 3) / (n - 1), 0.0) / n))
    return var, se
