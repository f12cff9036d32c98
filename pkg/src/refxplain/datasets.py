"""Tabular regression datasets: synthetic generators, CSV ingestion, scaling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class FeatureScaling:
    means: np.ndarray
    stds: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.means) / self.stds

    def invert(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.stds + self.means


@dataclass(frozen=True)
class TargetScaling:
    """Affine map of ``[t_min, t_max]`` onto ``[0, 1]``."""

    t_min: float
    t_max: float

    def __post_init__(self):
        if not self.t_max > self.t_min:
            raise DataError("target scaling needs t_max > t_min")

    @property
    def scale(self) -> float:
        return self.t_max - self.t_min

    def apply(self, y):
        return (np.asarray(y, dtype=float) - self.t_min) / self.scale

    def invert(self, s):
        return np.asarray(s, dtype=float) * self.scale + self.t_min


@dataclass
class TabularDataset:
    features: np.ndarray
    targets: np.ndarray
    feature_names: list[str]
    unit: str = ""
    name: str = ""
    standardization: FeatureScaling | None = None
    target_scaling: TargetScaling | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.array(self.features, dtype=float, ndmin=2)
        self.targets = np.array(self.targets, dtype=float).reshape(-1)
        n, d = self.features.shape
        if n < 1 or d < 1:
            raise DataError(f"dataset must have n >= 1 and d >= 1 (got {n}x{d})")
        if self.targets.shape[0] != n:
            raise DataError(f"{n} feature rows but {self.targets.shape[0]} targets")
        if len(self.feature_names) != d:
            raise DataError(f"{d} feature columns but {len(self.feature_names)} names")
        if np.isnan(self.features).any() or np.isnan(self.targets).any():
            raise DataError("dataset contains NaN")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> TabularDataset:
        return replace(self, features=self.features[idx], targets=self.targets[idx])


def _names(d: int) -> list[str]:
    return [f"x{i + 1}" for i in range(d)]


def gen_max(n: int = 1000, d: int = 8, seed: int = 0) -> TabularDataset:
    """Features uniform on [0, 1], target is the row maximum."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, d))
    return TabularDataset(
        X, X.max(axis=1), _names(d), name="max", metadata={"feature_range": [0.0, 1.0], "seed": seed}
    )


def gen_linear(
    n: int = 1000,
    d: int = 8,
    informative: int = 4,
    noise_std: float | None = None,
    seed: int = 0,
) -> TabularDataset:
    """Gaussian features, sparse linear target plus Gaussian noise.

    ``noise_std=None`` picks 1% of the noiseless signal's standard deviation.
    """
    if not 0 <= informative <= d:
        raise DataError("informative must lie in [0, d]")
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    w = np.zeros(d)
    support = np.sort(rng.choice(d, size=informative, replace=False))
    w[support] = rng.uniform(10.0, 100.0, size=informative) * rng.choice([-1.0, 1.0], size=informative)
    signal = X @ w
    if noise_std is None:
        noise_std = 0.01 * float(signal.std()) if informative else 1.0
    y = signal + rng.normal(0.0, noise_std, size=n) if noise_std > 0 else signal
    return TabularDataset(
        X,
        y,
        _names(d),
        name="linear",
        metadata={"weights": w.tolist(), "noise_std": noise_std, "seed": seed},
    )


def friedman2_target(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    x1, x2, x3, x4 = X[..., 0], X[..., 1], X[..., 2], X[..., 3]
    return np.sqrt(x1**2 + (x2 * x3 - 1.0 / (x2 * x4)) ** 2)


def gen_friedman2(n: int = 1000, noise: float = 0.0, seed: int = 0) -> TabularDataset:
    rng = np.random.default_rng(seed)
    X = np.column_stack(
        [
            rng.uniform(0.0, 100.0, n),
            rng.uniform(40.0 * math.pi, 560.0 * math.pi, n),
            rng.uniform(0.0, 1.0, n),
            rng.uniform(1.0, 11.0, n),
        ]
    )
    y = friedman2_target(X)
    if noise > 0:
        y = y + rng.normal(0.0, noise, size=n)
    return TabularDataset(X, y, _names(4), name="friedman", metadata={"noise": noise, "seed": seed})


def load_csv(path, target_column: str = "target", unit: str = "", name: str | None = None) -> TabularDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if target_column not in header:
        raise DataError(f"target column {target_column!r} not in header {header}")
    body = rows[1:]
    if not body:
        raise DataError(f"{path} has a header but no data rows")
    values = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(f"row {i + 2}: expected {len(header)} cells, found {len(row)}")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise DataError(f"non-numeric cell {cell!r} at row {i + 2}, column {header[j]!r}") from None
    t = header.index(target_column)
    feature_cols = [j for j in range(len(header)) if j != t]
    return TabularDataset(
        values[:, feature_cols],
        values[:, t],
        [header[j] for j in feature_cols],
        unit=unit,
        name=name or path.stem,
        metadata={"source": str(path)},
    )


BUNDLED = {
    "diabetes": ("diabetes.csv", "disease progression"),
    "boston": ("boston.csv", "1000 USD"),
}


def load_bundled(name: str) -> TabularDataset:
    """Load the packaged diabetes or boston CSV (target column ``target``)."""
    filename, unit = BUNDLED[name]
    with resources.as_file(resources.files("refxplain") / "data" / filename) as p:
        return load_csv(p, "target", unit=unit, name=name)


def fit_scaling(data: TabularDataset) -> tuple[FeatureScaling, TargetScaling]:
    means = data.features.mean(axis=0)
    stds = data.features.std(axis=0)
    for j, s in enumerate(stds):
        if s == 0.0:
            raise DataError(f"feature {data.feature_names[j]!r} is constant; cannot standardize")
    t_min, t_max = float(data.targets.min()), float(data.targets.max())
    if t_max == t_min:
        raise DataError("targets are constant; cannot rescale to [0, 1]")
    return FeatureScaling(means, stds), TargetScaling(t_min, t_max)


def apply_scaling(data: TabularDataset, fs: FeatureScaling, ts: TargetScaling) -> TabularDataset:
    return replace(
        data,
        features=fs.apply(data.features),
        targets=ts.apply(data.targets),
        standardization=fs,
        target_scaling=ts,
    )


def standardize(data: TabularDataset) -> TabularDataset:
    """z-score every feature and min-max scale the targets onto [0, 1]."""
    fs, ts = fit_scaling(data)
    return apply_scaling(data, fs, ts)


def invert_standardization(data: TabularDataset) -> TabularDataset:
    if data.standardization is None or data.target_scaling is None:
        raise DataError("dataset is not standardized")
    return replace(
        data,
        features=data.standardization.invert(data.features),
        targets=data.target_scaling.invert(data.targets),
        standardization=None,
        target_scaling=None,
    )


def train_test_split(data: TabularDataset, seed: int, test_fraction: float = 0.2):
    """Seeded shuffle, then the first 80% train and the rest test."""
    n = data.n
    order = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(test_fraction * n))) if n > 1 else 0
    return data.subset(order[: n - n_test]), data.subset(order[n - n_test :])


def prepare_split(data: TabularDataset, seed: int, test_fraction: float = 0.2):
    """Split, fit scaling on the train part, apply it to both parts."""
    train, test = train_test_split(data, seed, test_fraction)
    fs, ts = fit_scaling(train)
    return apply_scaling(train, fs, ts), apply_scaling(test, fs, ts)


GENERATORS = {
    "max": lambda n, seed: gen_max(n, 8, seed),
    "linear": lambda n, seed: gen_linear(n, 8, 4, None, seed),
    "friedman": lambda n, seed: gen_friedman2(n, 0.0, seed),
}


def get_dataset(name: str, seed: int = 0, n: int = 1000, path=None, target: str = "target") -> TabularDataset:
    if name in GENERATORS:
        return GENERATORS[name](n, seed)
    if name in BUNDLED:
        return load_bundled(name)
    if name == "csv":
        if path is None:
            raise DataError("dataset 'csv' needs a path")
        return load_csv(path, target)
    raise DataError(f"unknown dataset {name!r}")
