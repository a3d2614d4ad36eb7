"""Task functions a worker runs for FL: ``init``, ``learn`` and ``evaluate``.

``build_registry`` is the default ``function_registry_ref`` of a worker.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Mapping

from feddart.core import ParameterVector, derive_seed
from feddart.fact.data import Dataset, importer_from_spec
from feddart.fact.models import AbstractModel, build_model
from feddart.worker.runtime import WorkerContext

# Task parameters that override the model's own hyperparameters for one round.
OVERRIDABLE = ("learning_rate", "batch_size", "local_epochs", "mu")


class NotInitializedError(RuntimeError):
    code = "NOT_INITIALIZED"


class FactClient:
    def __init__(self, context: WorkerContext) -> None:
        self.context = context
        self.model: AbstractModel | None = None
        self.train_data: Dataset | None = None
        self.test_data: Dataset | None = None
        self.learn_count = 0

    def _load_data(self) -> None:
        if self.train_data is not None:
            return
        if not self.context.data:
            raise RuntimeError(f"device {self.context.device_name!r} has no local data configured")
        self.train_data, self.test_data = importer_from_spec(self.context.data).get_data()

    def init(self, params: Mapping[str, Any]) -> dict[str, Any]:
        global_params = params.get("global_model_parameters")
        self.model = build_model(
            params["model_type"],
            params.get("model_config", {}),
            params.get("model_hyperparameters"),
            params.get("aggregation_algorithm", "WEIGHTED_FEDAVG"),
            ParameterVector.from_json(global_params) if global_params else None,
        )
        self._load_data()
        return {"initialized": True, "n_train": len(self.train_data)}

    def learn(self, params: Mapping[str, Any]) -> dict[str, Any]:
        if self.model is None:
            raise NotInitializedError("learn called before init")
        task = dict(params.get("task_parameters") or {})
        self.model.parameters = ParameterVector.from_json(params["global_model_parameters"])
        data = self.train_data
        loss_before = self.model.loss(data)
        overrides = {k: task[k] for k in OVERRIDABLE if k in task}
        seed = derive_seed(
            self.model.hyperparameters.get("seed", 0),
            self.context.device_name,
            task.get("clustering_round", 0),
            task.get("round", 0),
        )
        updated = self.model.train(
            data,
            seed=seed,
            epochs=overrides.get("local_epochs"),
            mu=overrides.get("mu"),
            learning_rate=overrides.get("learning_rate"),
            batch_size=overrides.get("batch_size"),
        )
        self.learn_count += 1
        self._save(updated)
        return {
            "parameters": updated.to_json(),
            "sample_count": updated.sample_count,
            "loss": self.model.loss(data),
            "loss_before": loss_before,
        }

    def evaluate(self, params: Mapping[str, Any]) -> dict[str, Any]:
        if self.model is None:
            raise NotInitializedError("evaluate called before init")
        theta = None
        if params.get("global_model_parameters"):
            theta = ParameterVector.from_json(params["global_model_parameters"]).values
        result = {"loss": self.model.loss(self.train_data, theta), "n_train": len(self.train_data)}
        if self.test_data is not None and len(self.test_data):
            result["test_loss"] = self.model.loss(self.test_data, theta)
            result["n_test"] = len(self.test_data)
        return result

    def _save(self, params: ParameterVector) -> None:
        out = Path(self.context.output_dir)
        os.makedirs(out, exist_ok=True)
        with open(out / f"params_round_{self.learn_count}.json", "w", encoding="utf-8") as fh:
            json.dump(params.to_json(), fh)


def build_registry(context: WorkerContext) -> dict[str, Any]:
    client = FactClient(context)
    context.state["fact_client"] = client
    return {"init": client.init, "learn": client.learn, "evaluate": client.evaluate}
