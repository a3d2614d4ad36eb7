"""Clusters of clients, the container holding them, and re-clustering."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence

import numpy as np
from sklearn.cluster import KMeans

from feddart.core import ParameterVector
from feddart.fact.models import AbstractModel
from feddart.fact.stopping import (
    AbstractClusteringStoppingCriterion,
    AbstractFLStoppingCriterion,
    FixedRoundClusteringStoppingCriterion,
    clustering_criterion_from_json,
    fl_criterion_from_json,
)

KMEANS_RESTARTS = 10


class ClusteringAlgorithm(str, Enum):
    STATIC = "STATIC"
    KMEANS_ON_PARAMS = "KMEANS_ON_PARAMS"


class ClusteringError(ValueError):
    def __init__(self, code: str, message: str) -> None:
        self.code = code
        super().__init__(f"{code}: {message}")


@dataclass
class Cluster:
    client_names: list[str]
    model: AbstractModel
    fl_stopping_criterion: AbstractFLStoppingCriterion

    def __post_init__(self) -> None:
        self.client_names = list(self.client_names)
        if not self.client_names:
            raise ClusteringError("BAD_CONFIG", "a cluster needs at least one client")
        if len(set(self.client_names)) != len(self.client_names):
            raise ClusteringError("BAD_CONFIG", "duplicate client in cluster")

    def to_json(self) -> dict[str, Any]:
        return {
            "client_names": list(self.client_names),
            "model": self.model.to_json(),
            "fl_stopping_criterion": self.fl_stopping_criterion.to_json(),
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> Cluster:
        return cls(
            client_names=list(data["client_names"]),
            model=AbstractModel.from_json(data["model"]),
            fl_stopping_criterion=fl_criterion_from_json(data["fl_stopping_criterion"]),
        )


@dataclass
class ClusterContainer:
    clusters: list[Cluster]
    clustering_algorithm: ClusteringAlgorithm = ClusteringAlgorithm.STATIC
    clustering_stopping_criterion: AbstractClusteringStoppingCriterion = field(
        default_factory=lambda: FixedRoundClusteringStoppingCriterion(1)
    )
    n_clusters: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        self.clustering_algorithm = ClusteringAlgorithm(self.clustering_algorithm)
        if not self.clusters:
            raise ClusteringError("BAD_CONFIG", "container needs at least one cluster")
        seen: set[str] = set()
        for cluster in self.clusters:
            overlap = seen.intersection(cluster.client_names)
            if overlap:
                raise ClusteringError("BAD_CONFIG", f"clients in more than one cluster: {sorted(overlap)}")
            seen.update(cluster.client_names)

    @property
    def client_names(self) -> list[str]:
        return [name for cluster in self.clusters for name in cluster.client_names]

    def cluster_of(self, client: str) -> Cluster:
        for cluster in self.clusters:
            if client in cluster.client_names:
                return cluster
        raise KeyError(client)

    def to_json(self) -> dict[str, Any]:
        return {
            "clusters": [c.to_json() for c in self.clusters],
            "clustering_algorithm": self.clustering_algorithm.value,
            "clustering_stopping_criterion": self.clustering_stopping_criterion.to_json(),
            "n_clusters": self.n_clusters,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> ClusterContainer:
        return cls(
            clusters=[Cluster.from_json(c) for c in data["clusters"]],
            clustering_algorithm=ClusteringAlgorithm(data.get("clustering_algorithm", "STATIC")),
            clustering_stopping_criterion=clustering_criterion_from_json(
                data.get("clustering_stopping_criterion", {"max_rounds": 1})
            ),
            n_clusters=data.get("n_clusters"),
            seed=int(data.get("seed", 0)),
        )


def kmeans_labels(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """k-means++ seeded k-means, best of several restarts."""
    model = KMeans(n_clusters=k, init="k-means++", n_init=KMEANS_RESTARTS, random_state=seed)
    return model.fit_predict(points)


def apply_clustering(
    container: ClusterContainer, client_params: Mapping[str, ParameterVector], *, seed: int | None = None
) -> ClusterContainer:
    """Re-partition the clients of ``container``.

    STATIC hands the container back untouched. KMEANS_ON_PARAMS groups clients
    by their latest parameter vectors; every new cluster starts from the
    centroid of its members. A new cluster whose membership equals an existing
    one keeps that cluster's model and criterion.
    """
    if container.clustering_algorithm is ClusteringAlgorithm.STATIC:
        return container
    names = sorted(container.client_names)
    missing = [n for n in names if n not in client_params]
    if missing:
        raise ClusteringError("MISSING_PARAMS", f"no parameters for clients {missing}")
    k = len(container.clusters) if container.n_clusters is None else container.n_clusters
    if k < 1 or k > len(names):
        raise ClusteringError("DEGENERATE_K", f"k={k} with {len(names)} clients")
    points = np.array([client_params[n].values for n in names], dtype=np.float64)
    labels = kmeans_labels(points, k, container.seed if seed is None else seed)

    groups: dict[int, list[str]] = {}
    for name, label in zip(names, labels):
        groups.setdefault(int(label), []).append(name)
    # Canonical order: by smallest member name, so labels from k-means don't leak.
    ordered = sorted(groups.values(), key=lambda members: members[0])

    existing = {frozenset(c.client_names): c for c in container.clusters}
    template = container.clusters[0]
    clusters = []
    for members in ordered:
        kept = existing.get(frozenset(members))
        if kept is not None:
            clusters.append(Cluster(sorted(kept.client_names), kept.model, kept.fl_stopping_criterion))
            continue
        member_params = [client_params[m] for m in members]
        centroid = np.mean(np.array([p.values for p in member_params]), axis=0)
        count = sum(p.sample_count for p in member_params)
        source = container.cluster_of(members[0])
        model = source.model.copy(ParameterVector(tuple(centroid), count, template.model.parameters.shape))
        clusters.append(Cluster(members, model, source.fl_stopping_criterion))
    return ClusterContainer(
        clusters=clusters,
        clustering_algorithm=container.clustering_algorithm,
        clustering_stopping_criterion=container.clustering_stopping_criterion,
        n_clusters=container.n_clusters,
        seed=container.seed,
    )


def moved_clients(before: ClusterContainer, after: ClusterContainer) -> list[str]:
    """Clients whose cluster membership changed between two containers."""
    old = {name: frozenset(c.client_names) for c in before.clusters for name in c.client_names}
    new = {name: frozenset(c.client_names) for c in after.clusters for name in c.client_names}
    return sorted(name for name in new if old.get(name) != new[name])


def single_cluster(
    model: AbstractModel, client_names: Sequence[str], fl_stopping_criterion: AbstractFLStoppingCriterion
) -> ClusterContainer:
    """The container used when training is started from a bare model."""
    return ClusterContainer(
        clusters=[Cluster(list(client_names), model, fl_stopping_criterion)],
        clustering_algorithm=ClusteringAlgorithm.STATIC,
        clustering_stopping_criterion=FixedRoundClusteringStoppingCriterion(1),
    )
