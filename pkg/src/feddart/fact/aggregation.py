"""(Weighted) federated averaging of client parameter vectors."""

from __future__ import annotations

import math
from enum import Enum
from typing import Sequence

import numpy as np

from feddart.core import ParameterVector


class AggregationAlgorithm(str, Enum):
    FEDAVG = "FEDAVG"
    WEIGHTED_FEDAVG = "WEIGHTED_FEDAVG"
    FEDPROX = "FEDPROX"


class AggregationError(ValueError):
    def __init__(self, code: str, message: str) -> None:
        self.code = code
        super().__init__(f"{code}: {message}")


def aggregate_fedavg(results: Sequence[ParameterVector], weighted: bool = True) -> ParameterVector:
    """Component-wise mean of ``results``, weighted by sample count if asked.

    Each component is summed with ``math.fsum`` so the output does not depend
    on the order the clients reported in. Unweighted averaging uses the
    coefficient 1/K, which is exactly what n/(K*n) rounds to, so equal sample
    counts give bit-identical output in both modes.
    """
    if not results:
        raise AggregationError("EMPTY_RESULTS", "nothing to aggregate")
    length = len(results[0])
    if any(len(r) != length for r in results):
        raise AggregationError("LENGTH_MISMATCH", f"lengths {sorted({len(r) for r in results})}")
    total = sum(r.sample_count for r in results)
    if weighted:
        if total == 0:
            raise AggregationError("ZERO_WEIGHT", "all sample counts are zero")
        coefficients = np.array([r.sample_count / total for r in results])
    else:
        coefficients = np.full(len(results), 1.0 / len(results))
    matrix = np.array([r.values for r in results], dtype=np.float64).reshape(len(results), length)
    if not np.all(np.isfinite(matrix)):
        raise AggregationError("NONFINITE", "client parameters contain NaN or Inf")
    products = coefficients[:, None] * matrix
    values = tuple(math.fsum(column) for column in products.T)
    return ParameterVector(values, total, results[0].shape)


def aggregate(results: Sequence[ParameterVector], algorithm: AggregationAlgorithm) -> ParameterVector:
    algorithm = AggregationAlgorithm(algorithm)
    # FedProx changes local training only; the server side averages by sample count.
    return aggregate_fedavg(results, weighted=algorithm is not AggregationAlgorithm.FEDAVG)
