"""Fourier spectra of encoder/decoder functions and polynomial degree selection."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .vae import VaeModel, encode, reconstruct

Source = Literal["reconstruction", "encoder_mean", "raw_series"]
Detrend = Literal["none", "endpoints"]


@dataclass(frozen=True)
class Spectrum:
    """Complex amplitudes on a strictly increasing grid of frequencies (cycles per unit)."""

    frequencies: np.ndarray
    amplitudes: np.ndarray
    source: Source = "raw_series"

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        a = np.asarray(self.amplitudes, dtype=complex)
        if f.shape != a.shape or f.ndim != 1:
            raise ValueError("frequencies and amplitudes must be equal-length vectors")
        if np.any(np.diff(f) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "amplitudes", a)

    @property
    def power(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frequency", "amplitude_real", "amplitude_imag", "amplitude_abs"])
            for f, a in zip(self.frequencies, self.amplitudes):
                w.writerow([f"{f:.12g}", f"{a.real:.12g}", f"{a.imag:.12g}", f"{abs(a):.12g}"])

    @classmethod
    def from_csv(cls, path, source: Source = "raw_series") -> "Spectrum":
        rows = list(csv.DictReader(open(path, newline="")))
        f = [float(r["frequency"]) for r in rows]
        a = [complex(float(r["amplitude_real"]), float(r["amplitude_imag"])) for r in rows]
        return cls(np.array(f), np.array(a), source)


def naive_dft(y) -> np.ndarray:
    """O(N^2) direct sum X_k = sum_j y_j exp(-2 pi i j k / N), k = 0..N-1."""
    y = np.asarray(y)
    n = y.size
    jk = np.outer(np.arange(n), np.arange(n)) % n
    return np.exp(-2j * np.pi * jk / n) @ y


def dft(y, spacing: float = 1.0, source: Source = "raw_series") -> Spectrum:
    """Standard DFT of a uniformly sampled series, bins ordered by frequency.

    ``spacing`` is the sample interval, so frequencies come out in cycles per
    unit of the sampling coordinate.
    """
    y = np.asarray(y)
    if y.ndim != 1 or y.size < 2:
        raise ValueError("dft needs a series of length >= 2")
    X = np.fft.fft(y)
    freqs = np.fft.fftfreq(y.size, d=spacing)
    return Spectrum(np.fft.fftshift(freqs), np.fft.fftshift(X), source)


def nudft(t, y, omega, source: Source = "raw_series") -> Spectrum:
    """Direct-sum non-uniform DFT X(w_k) = sum_j y_j exp(-i w_k t_j).

    ``omega`` is in radians per unit; the returned frequencies are omega / 2pi.
    """
    t, y, omega = np.asarray(t, dtype=float), np.asarray(y), np.asarray(omega, dtype=float)
    if t.shape != y.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {y.shape}")
    if t.ndim != 1 or t.size < 2:
        raise ValueError("nudft needs at least two samples")
    X = np.exp(-1j * np.outer(omega, t)) @ y
    return Spectrum(omega / (2 * np.pi), X, source)


def uniform_omega_grid(n: int, spacing: float) -> np.ndarray:
    """Angular frequencies matching the bins of :func:`dft` for n samples."""
    return 2 * np.pi * np.fft.fftshift(np.fft.fftfreq(n, d=spacing))


def high_frequency_fraction(s: Spectrum, cutoff: float | None = None) -> float:
    """Share of non-DC energy at |f| > cutoff; default cutoff is a quarter of Nyquist."""
    f_max = np.max(np.abs(s.frequencies))
    if cutoff is None:
        cutoff = f_max / 4
    if not 0 <= cutoff <= f_max:
        raise ValueError(f"cutoff {cutoff} outside the frequency range [0, {f_max}]")
    return _fraction(s.frequencies, s.power, cutoff)


def _fraction(freqs, power, cutoff) -> float:
    non_dc = freqs != 0
    total = power[non_dc].sum()
    if total <= 0:
        raise ValueError("spectrum has no non-DC energy")
    return float(power[np.abs(freqs) > cutoff].sum() / total)


@dataclass
class SpectralProfile:
    """Per-dimension spectra of a vector-valued function sampled along t."""

    spectra: list[Spectrum]

    @property
    def frequencies(self) -> np.ndarray:
        return self.spectra[0].frequencies

    @property
    def mean_amplitude(self) -> np.ndarray:
        return np.mean([np.abs(s.amplitudes) for s in self.spectra], axis=0)

    @property
    def std_amplitude(self) -> np.ndarray:
        return np.std([np.abs(s.amplitudes) for s in self.spectra], axis=0)

    def high_frequency_fraction(self, cutoff: float | None = None, dims=None) -> float:
        """Fraction of pooled non-DC energy above the cutoff across ``dims`` (all by default)."""
        chosen = self.spectra if dims is None else [self.spectra[i] for i in dims]
        f_max = np.max(np.abs(self.frequencies))
        if cutoff is None:
            cutoff = f_max / 4
        if not 0 <= cutoff <= f_max:
            raise ValueError(f"cutoff {cutoff} outside the frequency range [0, {f_max}]")
        power = np.sum([s.power for s in chosen], axis=0)
        return _fraction(self.frequencies, power, cutoff)

    def peak_frequencies(self) -> list[float]:
        """Positive frequency of maximal amplitude for each dimension."""
        out = []
        for s in self.spectra:
            pos = s.frequencies > 0
            out.append(float(s.frequencies[pos][np.argmax(np.abs(s.amplitudes[pos]))]))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frequency", *[f"amplitude_abs_{i}" for i in range(len(self.spectra))],
                        "mean_amplitude_abs", "std_amplitude_abs"])
            amps = [np.abs(s.amplitudes) for s in self.spectra]
            for i, f in enumerate(self.frequencies):
                w.writerow([f"{f:.12g}", *[f"{a[i]:.12g}" for a in amps],
                            f"{self.mean_amplitude[i]:.12g}", f"{self.std_amplitude[i]:.12g}"])


def remove_endpoint_line(t, values) -> np.ndarray:
    """Subtract the straight line through the first and last samples of each column.

    The DFT treats a series as periodic, so unequal end values act like a jump
    whose 1/f tail swamps the high-frequency bins of a nearly flat function.
    """
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    frac = ((t - t[0]) / (t[-1] - t[0]))[:, None]
    return values - (values[:1] + (values[-1:] - values[:1]) * frac)


def series_spectra(t, values, source: Source = "raw_series", detrend: Detrend = "none") -> SpectralProfile:
    """Order samples by t and transform each column (DFT if uniform, NUDFT otherwise).

    ``detrend="endpoints"`` removes the line joining the end values first.
    """
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if t.ndim != 1 or t.size != values.shape[0]:
        raise ValueError("need one ordering coordinate per sample")
    order = np.argsort(t, kind="stable")
    t, values = t[order], values[order]
    steps = np.diff(t)
    spacing = (t[-1] - t[0]) / (t.size - 1)
    if spacing <= 0:
        raise ValueError("ordering coordinate is constant")
    if detrend == "endpoints":
        values = remove_endpoint_line(t, values)
    elif detrend != "none":
        raise ValueError(f"unknown detrend mode {detrend!r}")
    if np.allclose(steps, spacing, rtol=1e-9, atol=0):
        return SpectralProfile([dft(col, spacing, source) for col in values.T])
    omega = uniform_omega_grid(t.size, spacing)
    return SpectralProfile([nudft(t, col, omega, source) for col in values.T])


def reconstruction_spectrum(model: VaeModel, x, t, detrend: Detrend = "none") -> SpectralProfile:
    """Spectra of the deterministic reconstructions g(mu(x)) ordered by t."""
    if t is None:
        raise ValueError("dataset has no ordering coordinate")
    return series_spectra(t, reconstruct(model, np.atleast_2d(x)), "reconstruction", detrend)


def encoder_mean_spectrum(model: VaeModel, x, t, detrend: Detrend = "none") -> SpectralProfile:
    """Spectra of each latent coordinate of mu(x) ordered by t."""
    if t is None:
        raise ValueError("dataset has no ordering coordinate")
    return series_spectra(t, encode(model, np.atleast_2d(x))[0], "encoder_mean", detrend)


@dataclass
class DegreeSelectionResult:
    k_star: int
    cv_error_per_degree: dict[int, float]
    splits: int
    seed: int
    tie_tolerance: float = 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["degree", "mean_cv_mse"])
            for k, e in self.cv_error_per_degree.items():
                w.writerow([k, f"{e:.12g}"])


def _scaled(t, lo, hi):
    return 2.0 * (t - lo) / (hi - lo) - 1.0


def polynomial_fit(t, y, degree: int, domain=None):
    """Least-squares Chebyshev fit via QR; returns a callable predictor."""
    t, y = np.asarray(t, dtype=float), np.asarray(y, dtype=float)
    lo, hi = domain if domain is not None else (t.min(), t.max())
    if hi <= lo:
        raise ValueError("degenerate coordinate range")
    V = np.polynomial.chebyshev.chebvander(_scaled(t, lo, hi), degree)
    Q, R = np.linalg.qr(V)
    diag = np.abs(np.diag(R))
    if diag.size < degree + 1 or np.min(diag) <= 1e-10 * np.max(diag):
        raise ValueError(f"design matrix is rank deficient at degree {degree}")
    coef = np.linalg.solve(R, Q.T @ y)

    def predict(tt):
        return np.polynomial.chebyshev.chebval(_scaled(np.asarray(tt, dtype=float), lo, hi), coef)

    return predict


def optimal_poly_degree(t, y, k_max: int, n_splits: int = 10, seed: int = 0,
                        train_fraction: float = 0.8) -> DegreeSelectionResult:
    """Pick the polynomial degree with the lowest mean held-out MSE over random splits.

    Pairs are sorted by t before the seeded splits are drawn, so the result
    does not depend on the input order.  Degrees whose error is within
    round-off of the minimum (1e-10 of the data variance) count as ties and
    resolve to the smallest degree.
    """
    t, y = np.asarray(t, dtype=float), np.asarray(y, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError("t and y must be equal-length vectors")
    if t.size < 4 * (k_max + 1):
        raise ValueError(f"need at least {4 * (k_max + 1)} points for k_max={k_max}")
    order = np.lexsort((y, t))
    t, y = t[order], y[order]
    domain = (t.min(), t.max())
    rng = np.random.default_rng(seed)
    n_train = int(round(train_fraction * t.size))
    splits = [rng.permutation(t.size) for _ in range(n_splits)]
    errors = {}
    for k in range(k_max + 1):
        mse = []
        for perm in splits:
            tr, te = perm[:n_train], perm[n_train:]
            predict = polynomial_fit(t[tr], y[tr], k, domain)
            mse.append(np.mean((predict(t[te]) - y[te]) ** 2))
        errors[k] = float(np.mean(mse))
    tol = 1e-10 * float(np.var(y))
    best = min(errors.values())
    k_star = min(k for k, e in errors.items() if e <= best + tol)
    return DegreeSelectionResult(k_star, errors, n_splits, seed, tol)
