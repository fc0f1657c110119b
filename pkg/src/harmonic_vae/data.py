"""Synthetic 1-D datasets: sinc(5t) and a bank of sinusoids, stored as CSV."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

KINDS = ("sinc", "multisine")
DEFAULT_SIZES = {"sinc": 1024, "multisine": 2048}
MULTISINE_RATES = (0.5, 1.0, 2.0, 3.0, 5.0)


@dataclass(frozen=True)
class Dataset:
    t: np.ndarray
    y: np.ndarray  # (N, d)
    kind: str = "custom"

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if t.ndim != 1 or y.shape[0] != t.size:
            raise ValueError("need one t value per row of y")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.t.size

    def features(self, include_coordinate: bool = False) -> np.ndarray:
        """Model inputs: the y columns, optionally preceded by t."""
        return np.column_stack([self.t, self.y]) if include_coordinate else self.y.copy()

    def subset(self, n: int, seed: int) -> np.ndarray:
        """Sorted indices of n distinct rows chosen with the given seed."""
        if not 0 < n <= len(self):
            raise ValueError(f"cannot draw {n} points from {len(self)}")
        return np.sort(np.random.default_rng(seed).choice(len(self), size=n, replace=False))


def gen_dataset(kind: str, size: int | None = None, seed: int = 0, normalized_sinc: bool = True) -> Dataset:
    """Noise-free samples on t equispaced in [-1, 1]; the grid does not depend on ``seed``.

    sinc uses sin(pi u)/(pi u) at u = 5t unless ``normalized_sinc`` is False,
    in which case sin(u)/u is used.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    size = DEFAULT_SIZES[kind] if size is None else int(size)
    if size < 2:
        raise ValueError("dataset size must be at least 2")
    t = np.linspace(-1.0, 1.0, size)
    if kind == "sinc":
        u = 5.0 * t
        y = np.sinc(u) if normalized_sinc else np.sinc(u / np.pi)
        return Dataset(t, y[:, None], kind)
    y = np.column_stack([np.sin(2 * np.pi * r * t) for r in MULTISINE_RATES])
    return Dataset(t, y, kind)


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *[f"y_{i}" for i in range(ds.y.shape[1])]])
        for ti, row in zip(ds.t, ds.y):
            w.writerow([repr(float(ti)), *[repr(float(v)) for v in row]])


def read_dataset(path, kind: str = "custom") -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0].strip() != "t" or len(rows[0]) < 2:
        raise ValueError(f"{path}: expected a header 't,y_0,...'")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    if data.shape[0] < 2:
        raise ValueError(f"{path}: need at least two rows")
    return Dataset(data[:, 0], data[:, 1:], kind)
