"""Server-side FL orchestration on top of the workflow manager.

``initialize`` wraps a bare model in a single static cluster when needed,
connects, and initializes every cluster's clients. ``learning`` runs
clustering rounds: train all clusters (concurrently), re-cluster, check the
clustering stopping criterion. ``train_cluster`` runs FL rounds on one cluster
until its own stopping criterion holds.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from feddart.core import ParameterVector, TaskResult
from feddart.fact.clustering import (
    Cluster,
    ClusterContainer,
    ClusteringError,
    apply_clustering,
    moved_clients,
    single_cluster,
)
from feddart.fact.models import AbstractModel
from feddart.fact.stopping import AbstractFLStoppingCriterion
from feddart.manager import WorkflowError, WorkflowManager

log = logging.getLogger("feddart.fact")

# Extra time the server waits past max_wait before giving up on a task itself.
GRACE_SECONDS = 5.0


class FactError(RuntimeError):
    def __init__(self, code: str, message: str = "") -> None:
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)


@dataclass
class RoundRecord:
    clustering_round: int
    round: int
    cluster: int
    loss: float
    devices: list[str]
    durations: dict[str, float]
    missing: list[str] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "clustering_round": self.clustering_round,
            "round": self.round,
            "cluster": self.cluster,
            "loss": self.loss,
            "devices": self.devices,
            "durations": self.durations,
            "missing": self.missing,
        }


def init_parameters(model: AbstractModel) -> dict[str, Any]:
    return {
        "model_type": model.model_type,
        "model_config": dict(model.model_config),
        "model_hyperparameters": dict(model.hyperparameters),
        "aggregation_algorithm": model.aggregation_algorithm.value,
        "global_model_parameters": model.parameters.to_json(),
    }


class Server:
    def __init__(
        self,
        server_file: str | os.PathLike[str] | None = None,
        device_file: str | os.PathLike[str] | None = None,
        *,
        manager: WorkflowManager | None = None,
        test_mode: bool = False,
        max_wait_seconds: float = 60.0,
        parallel_clusters: bool = True,
        on_round: Callable[[RoundRecord], None] | None = None,
        task_prefix: str = "fact",
    ) -> None:
        self.server_file = server_file
        self.device_file = device_file
        self.manager = manager or WorkflowManager(test_mode=test_mode)
        self.max_wait_seconds = max_wait_seconds
        self.parallel_clusters = parallel_clusters
        self.on_round = on_round
        self.task_prefix = task_prefix
        self.container: ClusterContainer | None = None
        self.client_params: dict[str, ParameterVector] = {}
        self.history: list[RoundRecord] = []
        self.post_training_hooks: list[Callable[[Server], None]] = []
        self.task_counts: dict[str, int] = {}
        self._lock = threading.Lock()

    # ---------------------------------------------------------- initialization

    def initialization_by_model(self, model: AbstractModel, fl_stopping_criterion: AbstractFLStoppingCriterion) -> None:
        self.initialize(model, fl_stopping_criterion)

    def initialization(self, container: ClusterContainer) -> None:
        self.initialize(container)

    def initialize(
        self,
        source: ClusterContainer | AbstractModel,
        fl_stopping_criterion: AbstractFLStoppingCriterion | None = None,
    ) -> ClusterContainer:
        first_model = source.clusters[0].model if isinstance(source, ClusterContainer) else source
        if self.manager.selector is None:
            self.manager.create_init_task(init_parameters(first_model), "init")
            if self.server_file is None:
                raise FactError("BAD_CONFIG", "no server file given")
            try:
                self.manager.start_fed_dart(self.server_file, self.device_file)
            except WorkflowError as exc:
                raise FactError(exc.code, exc.message) from exc
        if isinstance(source, ClusterContainer):
            container = source
        else:
            if fl_stopping_criterion is None:
                raise FactError("BAD_CONFIG", "a bare model needs an FL stopping criterion")
            clients = self.manager.get_all_device_names()
            if not clients:
                raise FactError("BAD_CONFIG", "no clients to train on")
            container = single_cluster(source, clients, fl_stopping_criterion)
        if not container.client_names:
            raise FactError("BAD_CONFIG", "no clients to train on")
        for index, cluster in enumerate(container.clusters):
            self._init_clients(cluster, cluster.client_names, f"{self.task_prefix}-init-c{index}")
        self.container = container
        return container

    def _init_clients(self, cluster: Cluster, clients: list[str], task_name: str) -> None:
        params = init_parameters(cluster.model)
        handle = self._start(task_name, {name: params for name in clients}, "init")
        self.manager.wait_for_task(handle, self.max_wait_seconds + GRACE_SECONDS)
        results = self.manager.get_task_result(handle)
        failed = [r.device_name for r in results if r.failed]
        if failed:
            raise FactError("INIT_FAILED", f"init failed on {failed}: {results[0].result_dict.get('error')}")

    def _start(self, task_name: str, params: Mapping[str, Mapping[str, Any]], function: str):
        with self._lock:
            self.task_counts[function] = self.task_counts.get(function, 0) + 1
        try:
            return self.manager.start_task(params, function, self.max_wait_seconds, task_name=task_name)
        except WorkflowError as exc:
            raise FactError(exc.code, exc.message) from exc

    # ---------------------------------------------------------------- training

    def learning(self, task_parameters: Mapping[str, Any] | None = None) -> ClusterContainer:
        if self.container is None:
            raise FactError("NOT_INITIALIZED", "initialize the server before training")
        task_parameters = dict(task_parameters or {})
        clustering_round = 0
        while True:
            clustering_round += 1
            clusters = list(self.container.clusters)
            if self.parallel_clusters and len(clusters) > 1:
                with ThreadPoolExecutor(max_workers=len(clusters)) as pool:
                    futures = [
                        pool.submit(self.train_cluster, c, task_parameters, clustering_round, i)
                        for i, c in enumerate(clusters)
                    ]
                    for future in futures:
                        future.result()
            else:
                for i, cluster in enumerate(clusters):
                    self.train_cluster(cluster, task_parameters, clustering_round, i)
            try:
                reclustered = apply_clustering(self.container, self.client_params)
            except ClusteringError as exc:
                raise FactError(exc.code, str(exc)) from exc
            if reclustered is not self.container:
                self._reinitialize_moved(self.container, reclustered, clustering_round)
                self.container = reclustered
            if self.container.clustering_stopping_criterion.satisfied(clustering_round):
                break
        for hook in self.post_training_hooks:
            hook(self)
        return self.container

    training = learning

    def _reinitialize_moved(self, before: ClusterContainer, after: ClusterContainer, clustering_round: int) -> None:
        moved = set(moved_clients(before, after))
        for index, cluster in enumerate(after.clusters):
            clients = [c for c in cluster.client_names if c in moved]
            if clients:
                self._init_clients(cluster, clients, f"{self.task_prefix}-reinit-cr{clustering_round}-c{index}")

    def train_cluster(
        self,
        cluster: Cluster,
        task_parameters: Mapping[str, Any],
        clustering_round: int,
        cluster_index: int = 0,
    ) -> None:
        round_index = 0
        while True:
            round_index += 1
            global_params = cluster.model.parameters.to_json()
            task = {
                **task_parameters,
                "round": round_index,
                "clustering_round": clustering_round,
                "cluster": cluster_index,
            }
            params = {
                name: {"task_parameters": task, "global_model_parameters": global_params}
                for name in cluster.client_names
            }
            name = f"{self.task_prefix}-c{cluster_index}-cr{clustering_round}-r{round_index}"
            handle = self._start(name, params, "learn")
            status = self.manager.wait_for_task(handle, self.max_wait_seconds + GRACE_SECONDS)
            if not status.state.terminal:
                self.manager.stop_task(handle)
            results = self.manager.get_task_result(handle)
            self._aggregate_round(cluster, results, clustering_round, round_index, cluster_index)
            if cluster.fl_stopping_criterion.satisfied(round_index):
                return

    def _aggregate_round(
        self,
        cluster: Cluster,
        results: list[TaskResult],
        clustering_round: int,
        round_index: int,
        cluster_index: int,
    ) -> None:
        # Sorted by device so the aggregate never depends on arrival order.
        good = sorted((r for r in results if not r.failed), key=lambda r: r.device_name)
        if not good:
            raise FactError(
                "ROUND_EMPTY",
                f"cluster {cluster_index} round {round_index}: no usable results "
                f"({len(results)} arrived, {len(results) - len(good)} failed)",
            )
        vectors = [ParameterVector.from_json(r.result_dict["parameters"]) for r in good]
        cluster.model.aggregate(vectors)
        with self._lock:
            for r, vector in zip(good, vectors):
                self.client_params[r.device_name] = vector
        total = sum(v.sample_count for v in vectors) or len(vectors)
        loss = sum(float(r.result_dict.get("loss", 0.0)) * (v.sample_count or 1) for r, v in zip(good, vectors)) / total
        record = RoundRecord(
            clustering_round=clustering_round,
            round=round_index,
            cluster=cluster_index,
            loss=loss,
            devices=[r.device_name for r in good],
            durations={r.device_name: r.duration_seconds for r in good},
            missing=sorted(set(cluster.client_names) - {r.device_name for r in good}),
        )
        with self._lock:
            self.history.append(record)
            if self.on_round:
                self.on_round(record)
        log.info(
            "round done cluster=%d clustering_round=%d round=%d clients=%d loss=%.6g",
            cluster_index, clustering_round, round_index, len(good), loss,
        )

    # ------------------------------------------------------------------ output

    def export(self) -> dict[str, Any]:
        if self.container is None:
            raise FactError("NOT_INITIALIZED", "nothing trained yet")
        if len(self.container.clusters) == 1:
            return self.container.clusters[0].model.to_json()
        return self.container.to_json()

    def save_model(self, path: str | os.PathLike[str]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.export(), fh, indent=2)

    def close(self) -> None:
        self.manager.close()
