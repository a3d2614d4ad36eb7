"""Stopping criteria for FL rounds and for clustering rounds.

The server only passes the round number; extra metrics travel as keyword
arguments, so criteria that ignore them keep working when new ones are added.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Any, Mapping


class StoppingCriterion(ABC):
    kind: str

    @abstractmethod
    def satisfied(self, round: int, **metrics: Any) -> bool: ...  # noqa: A002

    @abstractmethod
    def to_json(self) -> dict[str, Any]: ...


class AbstractFLStoppingCriterion(StoppingCriterion):
    pass


class AbstractClusteringStoppingCriterion(StoppingCriterion):
    pass


class _FixedRounds:
    kind = "FIXED_ROUNDS"

    def __init__(self, max_rounds: int) -> None:
        if int(max_rounds) < 1:
            raise ValueError("max_rounds must be a positive integer")
        self.max_rounds = int(max_rounds)

    def satisfied(self, round: int, **metrics: Any) -> bool:  # noqa: A002
        return round >= self.max_rounds

    def to_json(self) -> dict[str, Any]:
        return {"kind": self.kind, "max_rounds": self.max_rounds}

    def __repr__(self) -> str:
        return f"{type(self).__name__}(max_rounds={self.max_rounds})"

    def __eq__(self, other: object) -> bool:
        return type(other) is type(self) and other.max_rounds == self.max_rounds  # type: ignore[attr-defined]


class FixedRoundFLStoppingCriterion(_FixedRounds, AbstractFLStoppingCriterion):
    pass


class FixedRoundClusteringStoppingCriterion(_FixedRounds, AbstractClusteringStoppingCriterion):
    pass


def fl_criterion_from_json(data: Mapping[str, Any]) -> AbstractFLStoppingCriterion:
    if data.get("kind", "FIXED_ROUNDS") != "FIXED_ROUNDS":
        raise ValueError(f"unknown stopping criterion {data.get('kind')!r}")
    return FixedRoundFLStoppingCriterion(data["max_rounds"])


def clustering_criterion_from_json(data: Mapping[str, Any]) -> AbstractClusteringStoppingCriterion:
    if data.get("kind", "FIXED_ROUNDS") != "FIXED_ROUNDS":
        raise ValueError(f"unknown stopping criterion {data.get('kind')!r}")
    return FixedRoundClusteringStoppingCriterion(data["max_rounds"])
