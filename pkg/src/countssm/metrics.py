"""Out-of-sample point-forecast losses: RMSE, MAE, Poisson deviance."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .dist import DomainError

__all__ = ["ForecastPair", "rmse", "mae", "pdl"]


@dataclass(frozen=True)
class ForecastPair:
    """An observed count and its forecast; the forecast must be positive
    because the deviance loss takes its logarithm."""

    actual: int
    predicted: float

    def __post_init__(self):
        if self.actual < 0 or self.actual != int(self.actual):
            raise DomainError(f"actual must be a nonnegative integer, got {self.actual!r}")
        if not self.predicted > 0.0:
            raise DomainError(f"predicted must be > 0, got {self.predicted}")


def _require(pairs: Sequence[ForecastPair]) -> Sequence[ForecastPair]:
    if not pairs:
        raise DomainError("need at least one forecast pair")
    return pairs


def rmse(pairs: Sequence[ForecastPair]) -> float:
    """Root mean squared error."""
    _require(pairs)
    return math.sqrt(math.fsum((p.actual - p.predicted) ** 2 for p in pairs) / len(pairs))


def mae(pairs: Sequence[ForecastPair]) -> float:
    """Mean absolute error."""
    _require(pairs)
    return math.fsum(abs(p.actual - p.predicted) for p in pairs) / len(pairs)


def pdl(pairs: Sequence[ForecastPair]) -> float:
    """Mean Poisson deviance 2(pred - actual - actual*log(pred/actual)).

    The actual = 0 term is read as 2*pred (the y*log(y) -> 0 limit).
    """
    _require(pairs)

    def term(p: ForecastPair) -> float:
        if p.actual == 0:
            return 2.0 * p.predicted
        return 2.0 * (p.predicted - p.actual - p.actual * math.log(p.predicted / p.actual))

    return math.fsum(term(p) for p in pairs) / len(pairs)
