"""One runnable FL experiment: config file in, metrics.jsonl and model.json out.

The same config runs in test mode or against a real server; only the
transport differs (``test_mode`` and the server/device files).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from feddart.config import ConfigError, DeviceConfig, ServerConfig, load_device_config, read_json, resolve_path
from feddart.fact.aggregation import AggregationAlgorithm
from feddart.fact.clustering import Cluster, ClusterContainer, ClusteringAlgorithm
from feddart.fact.data import resolve_data_specs
from feddart.fact.models import AbstractModel, build_model
from feddart.fact.server import FactError, RoundRecord, Server
from feddart.fact.stopping import FixedRoundClusteringStoppingCriterion, FixedRoundFLStoppingCriterion
from feddart.manager import WorkflowError, WorkflowManager
from feddart.worker.runtime import DEFAULT_REGISTRY, Worker, WorkerContext, load_registry

log = logging.getLogger("feddart.experiment")

EXIT_OK = 0
EXIT_BAD_CONFIG = 2
EXIT_CONNECT_FAILED = 3
EXIT_TRAINING_FAILED = 4

METRICS_FILE = "metrics.jsonl"
MODEL_FILE = "model.json"


@dataclass
class ExperimentConfig:
    server_file: str
    device_file: str
    model: dict[str, Any]
    aggregation: AggregationAlgorithm = AggregationAlgorithm.WEIGHTED_FEDAVG
    clustering: ClusteringAlgorithm = ClusteringAlgorithm.STATIC
    k: int = 1
    fl_rounds: int = 1
    clustering_rounds: int = 1
    data: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    test_mode: bool = True
    output_dir: str = "out"
    max_wait_seconds: float = 60.0
    task_parameters: dict[str, Any] = field(default_factory=dict)
    function_registry_ref: str = DEFAULT_REGISTRY

    def validate(self) -> None:
        for label, path in (("server_file", self.server_file), ("device_file", self.device_file)):
            if not path or not Path(path).is_file():
                raise ConfigError(f"{label} {path!r} does not exist")
        if self.fl_rounds < 1 or self.clustering_rounds < 1:
            raise ConfigError("fl_rounds and clustering_rounds must be at least 1")
        if self.k < 1:
            raise ConfigError("clustering k must be at least 1")
        if "model_type" not in self.model:
            raise ConfigError("model.model_type is required")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], base: str | os.PathLike[str] = "config.json") -> ExperimentConfig:
        """``base`` is the config file's own path; relative paths resolve next to it."""
        clustering = data.get("clustering") or {}
        if isinstance(clustering, str):
            clustering = {"algorithm": clustering}
        try:
            config = cls(
                server_file=resolve_path(base, data["server_file"]),
                device_file=resolve_path(base, data["device_file"]) if data.get("device_file") else "",
                model=dict(data["model"]),
                aggregation=AggregationAlgorithm(data.get("aggregation", "WEIGHTED_FEDAVG")),
                clustering=ClusteringAlgorithm(clustering.get("algorithm", "STATIC")),
                k=int(clustering.get("k", 1)),
                fl_rounds=int(data.get("fl_rounds", 1)),
                clustering_rounds=int(data.get("clustering_rounds", 1)),
                data=dict(data.get("data") or {}),
                seed=int(data.get("seed", 0)),
                test_mode=bool(data.get("test_mode", True)),
                output_dir=resolve_path(base, data.get("output_dir", "out")),
                max_wait_seconds=float(data.get("max_wait_seconds", 60.0)),
                task_parameters=dict(data.get("task_parameters") or {}),
                function_registry_ref=str(data.get("function_registry_ref", DEFAULT_REGISTRY)),
            )
        except KeyError as exc:
            raise ConfigError(f"experiment config is missing {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from None
        return config

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> ExperimentConfig:
        data = read_json(path)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_mapping(data, path)

    def devices(self) -> dict[str, DeviceConfig]:
        return load_device_config(self.device_file)

    def device_data(self, device_names: list[str] | None = None) -> dict[str, dict]:
        """Concrete data spec per device; entries in the device file win."""
        devices = self.devices()
        names = device_names or sorted(devices)
        specs = resolve_data_specs(self.data, names, self.seed) if self.data else {}
        for name in names:
            if name in devices and devices[name].data:
                specs[name] = dict(devices[name].data)
        return specs

    def build_model(self) -> AbstractModel:
        hyperparameters = {"seed": self.seed, **(self.model.get("hyperparameters") or {})}
        return build_model(
            self.model["model_type"],
            self.model.get("model_config", {}),
            hyperparameters,
            self.aggregation,
            self.model.get("initial_parameters"),
        )

    def build_container(self, client_names: list[str]) -> ClusterContainer:
        """All clients start in one cluster; k-means splits them after the first clustering round."""
        return ClusterContainer(
            clusters=[Cluster(sorted(client_names), self.build_model(), FixedRoundFLStoppingCriterion(self.fl_rounds))],
            clustering_algorithm=self.clustering,
            clustering_stopping_criterion=FixedRoundClusteringStoppingCriterion(self.clustering_rounds),
            n_clusters=self.k if self.clustering is ClusteringAlgorithm.KMEANS_ON_PARAMS else None,
            seed=self.seed,
        )


def local_worker_factory(config: ExperimentConfig):
    """Build simulated devices for test mode from the experiment's data block."""
    data = config.device_data()

    def factory(device: DeviceConfig) -> Worker:
        context = WorkerContext(
            device_name=device.name,
            output_dir=str(Path(config.output_dir) / "devices" / device.name),
            data=data.get(device.name),
            hardware_config=device.hardware_config,
        )
        return Worker(context, load_registry(config.function_registry_ref, context))

    return factory


@dataclass
class ExperimentOutcome:
    exit_code: int
    error: str = ""
    history: list[RoundRecord] = field(default_factory=list)
    model: dict[str, Any] | None = None


def run_experiment(config: ExperimentConfig, *, manager: WorkflowManager | None = None) -> ExperimentOutcome:
    try:
        config.validate()
        devices = config.devices()
        ServerConfig.load(config.server_file)
        container = config.build_container(sorted(devices))
        factory = local_worker_factory(config) if config.test_mode else None
    except (ConfigError, ValueError, KeyError) as exc:
        log.error("bad config: %s", exc)
        return ExperimentOutcome(EXIT_BAD_CONFIG, str(exc))

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / METRICS_FILE
    metrics = open(metrics_path, "w", encoding="utf-8")

    def write_record(record: RoundRecord) -> None:
        metrics.write(json.dumps(record.to_json()) + "\n")
        metrics.flush()

    manager = manager or WorkflowManager(test_mode=config.test_mode, worker_factory=factory)
    server = Server(
        config.server_file,
        config.device_file,
        manager=manager,
        max_wait_seconds=config.max_wait_seconds,
        on_round=write_record,
    )
    try:
        try:
            server.initialization(container)
        except (FactError, WorkflowError) as exc:
            code = EXIT_BAD_CONFIG if exc.code == "BAD_CONFIG" else EXIT_CONNECT_FAILED
            log.error("initialization failed: %s", exc)
            return ExperimentOutcome(code, str(exc), list(server.history))
        try:
            server.learning(config.task_parameters)
        except (FactError, WorkflowError, ArithmeticError) as exc:
            log.error("training failed: %s", exc)
            return ExperimentOutcome(EXIT_TRAINING_FAILED, str(exc), list(server.history))
        server.save_model(out / MODEL_FILE)
        return ExperimentOutcome(EXIT_OK, history=list(server.history), model=server.export())
    finally:
        metrics.close()
        server.close()
