"""Model abstraction plus two small convex models trained by mini-batch GD."""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Any, ClassVar, Mapping, Sequence

import numpy as np

from feddart.core import ParameterVector
from feddart.fact.aggregation import AggregationAlgorithm, aggregate
from feddart.fact.data import Dataset

DEFAULT_HYPERPARAMETERS: dict[str, Any] = {
    "learning_rate": 0.1,
    "batch_size": 32,
    "local_epochs": 1,
    "mu": 0.01,
    "seed": 0,
}

MODEL_TYPES: dict[str, type[AbstractModel]] = {}


class NonFiniteLossError(ArithmeticError):
    code = "NONFINITE_LOSS"


class AbstractModel(ABC):
    model_type: ClassVar[str]

    def __init__(
        self,
        model_config: Mapping[str, Any],
        hyperparameters: Mapping[str, Any] | None = None,
        aggregation_algorithm: AggregationAlgorithm | str = AggregationAlgorithm.WEIGHTED_FEDAVG,
        parameters: ParameterVector | Sequence[float] | None = None,
    ) -> None:
        self.model_config = dict(model_config)
        self.hyperparameters = {**DEFAULT_HYPERPARAMETERS, **(hyperparameters or {})}
        self.aggregation_algorithm = AggregationAlgorithm(aggregation_algorithm)
        if parameters is None:
            parameters = ParameterVector(tuple(self.initial_values()), 0)
        elif not isinstance(parameters, ParameterVector):
            parameters = ParameterVector(tuple(parameters), 0)
        self.parameters = parameters

    def __init_subclass__(cls, **kwargs: Any) -> None:
        super().__init_subclass__(**kwargs)
        if "model_type" in cls.__dict__:
            MODEL_TYPES[cls.model_type] = cls

    @property
    @abstractmethod
    def n_parameters(self) -> int: ...

    def initial_values(self) -> np.ndarray:
        return np.zeros(self.n_parameters)

    @property
    def parameters(self) -> ParameterVector:
        return self._parameters

    @parameters.setter
    def parameters(self, value: ParameterVector) -> None:
        if len(value) != self.n_parameters:
            raise ValueError(f"{self.model_type} expects {self.n_parameters} parameters, got {len(value)}")
        self._parameters = value

    @property
    def theta(self) -> np.ndarray:
        return np.array(self.parameters.values, dtype=np.float64)

    @abstractmethod
    def loss(self, data: Dataset, theta: np.ndarray | None = None) -> float: ...

    @abstractmethod
    def gradient(self, data: Dataset, theta: np.ndarray | None = None) -> np.ndarray: ...

    def train(
        self,
        data: Dataset,
        *,
        seed: int = 0,
        epochs: int | None = None,
        mu: float | None = None,
        learning_rate: float | None = None,
        batch_size: int | None = None,
    ) -> ParameterVector:
        """Run local mini-batch gradient descent starting from the current parameters.

        For FEDPROX models the penalty (mu/2)*||theta - theta_start||^2 is applied
        through its proximal step, which stays stable for any mu. With mu == 0
        the proximal step is skipped altogether, so the trajectory is exactly
        that of plain training.
        """
        epochs = int(self.hyperparameters["local_epochs"] if epochs is None else epochs)
        lr = float(self.hyperparameters["learning_rate"] if learning_rate is None else learning_rate)
        batch = int(self.hyperparameters["batch_size"] if batch_size is None else batch_size)
        if mu is None:
            mu = self.hyperparameters["mu"] if self.aggregation_algorithm is AggregationAlgorithm.FEDPROX else 0.0
        mu = float(mu)
        if mu < 0:
            raise ValueError("mu must be non-negative")
        n = len(data)
        if n == 0:
            raise ValueError("cannot train on an empty dataset")
        batch = max(1, min(batch, n))
        anchor = self.theta
        theta = anchor.copy()
        rng = np.random.default_rng(seed)
        # Overflow is caught by the finiteness checks below, not by numpy warnings.
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(epochs):
                order = rng.permutation(n)
                for start in range(0, n, batch):
                    idx = order[start : start + batch]
                    step = theta - lr * self.gradient(Dataset(data.X[idx], data.y[idx]), theta)
                    if mu != 0.0:
                        step = (step + (lr * mu) * anchor) / (1.0 + lr * mu)
                    theta = step
                if not np.all(np.isfinite(theta)):
                    raise NonFiniteLossError("training diverged; lower the learning rate")
            if not np.isfinite(self.loss(data, theta)):
                raise NonFiniteLossError("training diverged; lower the learning rate")
        self.parameters = ParameterVector(tuple(theta), n, self.parameters.shape)
        return self.parameters

    def aggregate(self, results: Sequence[ParameterVector]) -> ParameterVector:
        self.parameters = aggregate(results, self.aggregation_algorithm)
        return self.parameters

    def copy(self, parameters: ParameterVector | None = None) -> AbstractModel:
        return type(self)(
            self.model_config,
            self.hyperparameters,
            self.aggregation_algorithm,
            parameters if parameters is not None else self.parameters,
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "model_type": self.model_type,
            "model_config": dict(self.model_config),
            "hyperparameters": dict(self.hyperparameters),
            "aggregation_algorithm": self.aggregation_algorithm.value,
            "parameters": self.parameters.to_json(),
        }

    @staticmethod
    def from_json(data: Mapping[str, Any]) -> AbstractModel:
        return build_model(
            data["model_type"],
            data.get("model_config", {}),
            data.get("hyperparameters"),
            data.get("aggregation_algorithm", AggregationAlgorithm.WEIGHTED_FEDAVG),
            ParameterVector.from_json(data["parameters"]) if data.get("parameters") else None,
        )


def build_model(
    model_type: str,
    model_config: Mapping[str, Any],
    hyperparameters: Mapping[str, Any] | None = None,
    aggregation_algorithm: AggregationAlgorithm | str = AggregationAlgorithm.WEIGHTED_FEDAVG,
    parameters: ParameterVector | None = None,
) -> AbstractModel:
    try:
        cls = MODEL_TYPES[model_type]
    except KeyError:
        raise ValueError(f"unknown model type {model_type!r}; known: {sorted(MODEL_TYPES)}") from None
    return cls(model_config, hyperparameters, aggregation_algorithm, parameters)


class _GLM(AbstractModel):
    """Weights followed by a bias, acting on a linear score X @ w + b."""

    @property
    def n_features(self) -> int:
        return int(self.model_config["n_features"])

    @property
    def n_parameters(self) -> int:
        return self.n_features + 1

    def _theta(self, theta: np.ndarray | None) -> np.ndarray:
        return self.theta if theta is None else np.asarray(theta, dtype=np.float64)

    def score(self, X: np.ndarray, theta: np.ndarray | None = None) -> np.ndarray:
        theta = self._theta(theta)
        return X @ theta[:-1] + theta[-1]

    def _residual_gradient(self, data: Dataset, residual: np.ndarray) -> np.ndarray:
        n = len(data)
        return np.concatenate([data.X.T @ residual / n, [residual.sum() / n]])


class LinearModel(_GLM):
    """Least squares: loss = mean((X w + b - y)^2) / 2."""

    model_type = "linear"

    def predict(self, X: np.ndarray, theta: np.ndarray | None = None) -> np.ndarray:
        return self.score(X, theta)

    def loss(self, data: Dataset, theta: np.ndarray | None = None) -> float:
        r = self.score(data.X, theta) - data.y
        return float(0.5 * np.mean(r * r))

    def gradient(self, data: Dataset, theta: np.ndarray | None = None) -> np.ndarray:
        return self._residual_gradient(data, self.score(data.X, theta) - data.y)


class LogisticModel(_GLM):
    """Binary log loss on labels in {0, 1}."""

    model_type = "logistic"

    def predict_proba(self, X: np.ndarray, theta: np.ndarray | None = None) -> np.ndarray:
        z = self.score(X, theta)
        return np.exp(-np.logaddexp(0.0, -z))

    def loss(self, data: Dataset, theta: np.ndarray | None = None) -> float:
        z = self.score(data.X, theta)
        return float(np.mean(np.logaddexp(0.0, z) - data.y * z))

    def gradient(self, data: Dataset, theta: np.ndarray | None = None) -> np.ndarray:
        return self._residual_gradient(data, self.predict_proba(data.X, theta) - data.y)


def local_train_fedprox(
    model: AbstractModel,
    global_params: ParameterVector,
    data: Dataset,
    mu: float,
    epochs: int,
    *,
    seed: int = 0,
) -> ParameterVector:
    """Start ``model`` at ``global_params`` and train on the proximally penalised objective."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    model.parameters = global_params
    return model.train(data, seed=seed, epochs=epochs, mu=mu)
