"""Tabular data: CSV ingestion, standardisation, splits and the waveform generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numerics import as_generator


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    responses: np.ndarray
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None
    response_mean: float | None = None
    response_std: float | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.responses = np.asarray(self.responses, dtype=float).ravel()
        if self.features.shape[0] != self.responses.shape[0]:
            raise DataError("features and responses have different row counts")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "Dataset":
        return replace(self, features=self.features[idx], responses=self.responses[idx])


def load_csv(path, feature_cols=None, response_col=-1, header: bool = False) -> Dataset:
    """Read a numeric CSV. ``feature_cols=None`` takes every column but the response."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    rows = []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for r, row in enumerate(reader, start=1):
            if header and r == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            vals = []
            for c, cell in enumerate(row, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c}") from None
                if math.isnan(v):
                    raise DataError(f"{path}: NaN cell at row {r}, column {c}")
                vals.append(v)
            if rows and len(vals) != len(rows[0]):
                raise DataError(f"{path}: row {r} has {len(vals)} cells, expected {len(rows[0])}")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    A = np.array(rows)
    n_cols = A.shape[1]
    rc = response_col % n_cols
    cols = [c for c in range(n_cols) if c != rc] if feature_cols is None else list(feature_cols)
    return Dataset(A[:, cols], A[:, rc])


def write_csv(path, data: Dataset, header: bool = True) -> None:
    A = np.hstack([data.features, data.responses[:, None]])
    head = ",".join([f"x{i + 1}" for i in range(data.features.shape[1])] + ["y"]) if header else ""
    np.savetxt(path, A, delimiter=",", header=head, comments="", fmt="%.17g", encoding="utf-8")


def standardize(data: Dataset, stats: Dataset | None = None, responses: bool = True) -> Dataset:
    """Zero-mean, unit-variance columns (population std).

    ``stats`` reuses another dataset's mean/std (e.g. a training split's) so
    a test split is mapped consistently.
    """
    if stats is None:
        mu = data.features.mean(axis=0)
        sd = data.features.std(axis=0)
        bad = np.flatnonzero(sd <= 1e-12 * np.maximum(1.0, np.abs(mu)))
        if bad.size:
            raise DataError(f"zero-variance feature columns: {bad.tolist()}")
        ym, ys = (float(data.responses.mean()), float(data.responses.std())) if responses else (0.0, 1.0)
        if ys <= 0:
            raise DataError("response column has zero variance")
    else:
        mu, sd, ym, ys = stats.feature_mean, stats.feature_std, stats.response_mean, stats.response_std
    return Dataset((data.features - mu) / sd, (data.responses - ym) / ys, mu, sd, ym, ys)


def split(data: Dataset, rng, train_fraction: float | None = None,
          counts: tuple[int, int] | None = None) -> tuple[Dataset, Dataset]:
    """Seeded random partition into (train, test)."""
    n = len(data)
    if counts is not None:
        n_train, n_test = counts
        if n_train + n_test > n:
            raise DataError(f"split counts {counts} exceed {n} rows")
    elif train_fraction is not None:
        n_train = int(round(train_fraction * n))
        n_test = n - n_train
    else:
        raise ValueError("give train_fraction or counts")
    perm = as_generator(rng).permutation(n)
    return data.subset(perm[:n_train]), data.subset(perm[n_train : n_train + n_test])


def waveform_bases() -> np.ndarray:
    """The three triangular base waves on 21 points."""
    i = np.arange(1, 22)
    h1 = np.maximum(6.0 - np.abs(i - 11), 0.0)
    h2 = np.maximum(6.0 - np.abs(i - 15), 0.0)
    h3 = np.maximum(6.0 - np.abs(i - 7), 0.0)
    return np.stack([h1, h2, h3])


def generate_waveform(n: int, rng, binary: bool = True) -> Dataset:
    """Breiman's waveform generator (21 noisy attributes, 3 classes).

    Class ``c`` is a random convex combination of two base waves plus unit
    Gaussian noise. With ``binary`` the label is class 0 versus {1, 2}.
    """
    gen = as_generator(rng)
    H = waveform_bases()
    pairs = np.array([[0, 1], [0, 2], [1, 2]])
    cls = gen.integers(0, 3, size=n)
    u = gen.uniform(size=(n, 1))
    a, b = H[pairs[cls, 0]], H[pairs[cls, 1]]
    X = u * a + (1.0 - u) * b + gen.standard_normal((n, 21))
    y = (cls == 0).astype(float) if binary else cls.astype(float)
    return Dataset(X, y)
