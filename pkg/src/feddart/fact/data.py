"""Client-side data import: load, preprocess, split.

Importers are built from small JSON specs so a device's data source can sit in
its worker config (or, for simulated devices, in the experiment config).
"""

from __future__ import annotations

import csv
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from feddart.core import derive_seed


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @staticmethod
    def concat(parts: Sequence[Dataset]) -> Dataset:
        return Dataset(np.vstack([p.X for p in parts]), np.concatenate([p.y for p in parts]))


class AbstractDataImporter(ABC):
    """Subclasses fill in the three stages; ``get_data`` runs them in order."""

    @abstractmethod
    def load_data(self) -> Dataset: ...

    def preprocess_data(self, data: Dataset) -> Dataset:
        return data

    @abstractmethod
    def split_data_into_train_and_test(self, data: Dataset) -> tuple[Dataset, Dataset]: ...

    def get_data(self) -> tuple[Dataset, Dataset]:
        return self.split_data_into_train_and_test(self.preprocess_data(self.load_data()))


def _tail_split(data: Dataset, test_fraction: float) -> tuple[Dataset, Dataset]:
    n_test = int(round(len(data) * test_fraction))
    n_train = len(data) - n_test
    return Dataset(data.X[:n_train], data.y[:n_train]), Dataset(data.X[n_train:], data.y[n_train:])


class SyntheticDataImporter(AbstractDataImporter):
    """Seeded linear or logistic data around a known optimum."""

    def __init__(
        self,
        *,
        kind: str = "linear",
        n_samples: int = 200,
        n_features: int = 2,
        weights: Sequence[float] | None = None,
        bias: float = 0.0,
        noise: float = 0.1,
        seed: int = 0,
        test_fraction: float = 0.0,
    ) -> None:
        if kind not in ("linear", "logistic"):
            raise ValueError(f"unknown synthetic kind {kind!r}")
        self.kind = kind
        self.n_samples = int(n_samples)
        self.n_features = int(n_features)
        self.weights = np.asarray(weights if weights is not None else np.ones(self.n_features), dtype=np.float64)
        if self.weights.shape != (self.n_features,):
            raise ValueError("weights must have n_features entries")
        self.bias = float(bias)
        self.noise = float(noise)
        self.seed = int(seed)
        self.test_fraction = float(test_fraction)

    def load_data(self) -> Dataset:
        rng = np.random.default_rng(self.seed)
        X = rng.standard_normal((self.n_samples, self.n_features))
        z = X @ self.weights + self.bias
        if self.kind == "linear":
            y = z + self.noise * rng.standard_normal(self.n_samples)
        else:
            y = (rng.random(self.n_samples) < 1.0 / (1.0 + np.exp(-z))).astype(np.float64)
        return Dataset(X, y)

    def split_data_into_train_and_test(self, data: Dataset) -> tuple[Dataset, Dataset]:
        return _tail_split(data, self.test_fraction)


class CSVDataImporter(AbstractDataImporter):
    """Numeric CSV with a header row; one column is the target."""

    def __init__(self, *, path: str, target: str, test_fraction: float = 0.2, standardize: bool = False) -> None:
        self.path = path
        self.target = target
        self.test_fraction = float(test_fraction)
        self.standardize = standardize

    def load_data(self) -> Dataset:
        with open(self.path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{self.path}: no data rows")
        features = [c for c in rows[0] if c != self.target]
        if self.target not in rows[0]:
            raise ValueError(f"{self.path}: no column {self.target!r}")
        X = np.array([[float(row[c]) for c in features] for row in rows])
        y = np.array([float(row[self.target]) for row in rows])
        return Dataset(X, y)

    def preprocess_data(self, data: Dataset) -> Dataset:
        if not self.standardize:
            return data
        std = data.X.std(axis=0)
        std[std == 0] = 1.0
        return Dataset((data.X - data.X.mean(axis=0)) / std, data.y)

    def split_data_into_train_and_test(self, data: Dataset) -> tuple[Dataset, Dataset]:
        return _tail_split(data, self.test_fraction)


def importer_from_spec(spec: Mapping[str, Any]) -> AbstractDataImporter:
    spec = dict(spec)
    kind = spec.pop("type", "synthetic")
    if kind == "synthetic":
        return SyntheticDataImporter(**spec)
    if kind == "csv":
        return CSVDataImporter(**spec)
    raise ValueError(f"unknown data importer type {kind!r}")


def resolve_data_specs(data_config: Mapping[str, Any], device_names: Sequence[str], seed: int) -> dict[str, dict]:
    """Turn an experiment's ``data`` block into one concrete spec per device.

    Two forms are understood::

        {"clients": {"client1": {...spec...}, ...}}
        {"synthetic": {...generator params..., "populations": [...], "assignment": {...}}}

    In the synthetic form every device gets its own seed, derived from the
    experiment seed and the device name. ``populations`` lists per-population
    ``weights``/``bias``; ``assignment`` maps device name to population index
    (default: round-robin over the sorted device names).
    """
    if "clients" in data_config:
        clients = data_config["clients"]
        missing = [d for d in device_names if d not in clients]
        if missing:
            raise ValueError(f"no data spec for devices: {', '.join(missing)}")
        return {d: dict(clients[d]) for d in device_names}
    if "synthetic" not in data_config:
        raise ValueError("data config needs 'clients' or 'synthetic'")
    base = dict(data_config["synthetic"])
    populations = base.pop("populations", None)
    assignment = base.pop("assignment", None)
    specs = {}
    for index, name in enumerate(sorted(device_names)):
        spec = {"type": "synthetic", **base, "seed": derive_seed("data", seed, name)}
        if populations:
            population = assignment[name] if assignment else index % len(populations)
            spec.update(populations[population])
        specs[name] = spec
    return specs
