"""Variance-regime schedules for the latent risk factor.

Each regime is a rule for the pair (q_shape, q_rate) consumed by the
predict step: the predictive gamma parameters are

    shape' = q_shape * shape + (q_rate - q_shape) * rate
    rate'  = q_rate * rate

subject to 0 <= q_shape <= q_rate <= 1 and q_rate > 0.  The choice of
rule fixes the long-run behaviour of Var(Theta_t): increasing,
decreasing, converging, bounded, constant, or degenerate (shared /
independent).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dist import DomainError

__all__ = [
    "RegimeKind",
    "RegimeSpec",
    "ScheduleContext",
    "q_pair",
    "constant_variance_q2",
    "constant_variance_check",
    "variance_recursion",
    "schedule_pairs",
]


class RegimeKind(str, Enum):
    INDEPENDENT = "independent"
    SHARED = "shared"
    INCREASING = "increasing"
    DECREASING = "decreasing"
    CONVERGING = "converging"
    BOUNDED = "bounded"
    CONSTANT_VARIANCE = "constant_variance"


# Free dynamics parameters per regime, in optimizer order.
FREE_PARAMS: dict[RegimeKind, tuple[str, ...]] = {
    RegimeKind.INDEPENDENT: ("beta0",),
    RegimeKind.SHARED: ("beta0",),
    RegimeKind.INCREASING: ("beta0", "q"),
    RegimeKind.DECREASING: ("beta0", "p"),
    RegimeKind.CONVERGING: ("beta0", "p", "q"),
    RegimeKind.BOUNDED: ("beta0", "p", "q"),
    RegimeKind.CONSTANT_VARIANCE: ("beta0", "p"),
}


@dataclass(frozen=True)
class RegimeSpec:
    """A regime kind plus its parameters.

    beta0 is the common prior shape/rate (prior mean 1, prior variance
    1/beta0).  p and q are only meaningful for the kinds that use them;
    boundary values (q = 1, p in {0, 1}) are admissible so nested models
    can be evaluated exactly at the enclosing model's parameters.
    """

    kind: RegimeKind
    beta0: float
    p: float | None = None
    q: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", RegimeKind(self.kind))
        if not self.beta0 > 0.0:
            raise DomainError(f"beta0 must be > 0, got {self.beta0}")
        needs = FREE_PARAMS[self.kind]
        if "p" in needs:
            if self.p is None or not 0.0 <= self.p <= 1.0:
                raise DomainError(f"{self.kind.value} regime needs 0 <= p <= 1, got {self.p}")
        elif self.p is not None:
            raise DomainError(f"{self.kind.value} regime takes no p parameter")
        if "q" in needs:
            if self.q is None or not 0.0 < self.q <= 1.0:
                raise DomainError(f"{self.kind.value} regime needs 0 < q <= 1, got {self.q}")
        elif self.q is not None:
            raise DomainError(f"{self.kind.value} regime takes no q parameter")

    @property
    def free_params(self) -> tuple[str, ...]:
        return FREE_PARAMS[self.kind]

    # Display conventions for comparison tables: degenerate kinds report
    # the effective (p, q) of their schedule.
    @property
    def display_p(self) -> float | None:
        if self.kind is RegimeKind.INDEPENDENT:
            return 0.0
        if self.kind in (RegimeKind.SHARED, RegimeKind.INCREASING):
            return 1.0
        return self.p

    @property
    def display_q(self) -> float | None:
        if self.kind in (RegimeKind.INDEPENDENT, RegimeKind.SHARED, RegimeKind.DECREASING):
            return 1.0
        if self.kind is RegimeKind.CONSTANT_VARIANCE:
            return None
        return self.q


@dataclass(frozen=True)
class ScheduleContext:
    """Per-step state a schedule may depend on: the current posterior rate."""

    beta: float

    def __post_init__(self):
        if not self.beta > 0.0:
            raise DomainError(f"schedule context needs beta > 0, got {self.beta}")


def constant_variance_q2(beta0, p, beta):
    """Rate discount that keeps Var(Theta_t) pinned at 1/beta0.

    Shared by the scalar schedule and the vectorized panel kernel
    (scalar or elementwise array in beta).
    """
    return beta0 / (p * p * beta0 + (1.0 - p * p) * beta)


def q_pair(spec: RegimeSpec, ctx: ScheduleContext) -> tuple[float, float]:
    """The (q_shape, q_rate) pair for the next predict step."""
    kind = spec.kind
    if kind is RegimeKind.SHARED:
        return 1.0, 1.0
    if kind is RegimeKind.INCREASING:
        return spec.q, spec.q
    if kind is RegimeKind.DECREASING:
        return spec.p, 1.0
    if kind in (RegimeKind.CONVERGING, RegimeKind.BOUNDED):
        return spec.p * spec.q, spec.q
    if kind is RegimeKind.CONSTANT_VARIANCE:
        q2 = constant_variance_q2(spec.beta0, spec.p, ctx.beta)
        return spec.p * q2, q2
    raise DomainError(
        "independent regime has no predictive schedule; the filter resets to the prior"
    )


def constant_variance_check(beta0, p, beta_t, qstar, q2) -> float:
    """Residual of the constant-variance balance equation.

    Zero exactly when the pair (qstar, q2) keeps the unconditional
    variance at 1/beta0 given the current rate beta_t.
    """
    return (1.0 / q2) * (1.0 / beta_t) + (qstar / q2) ** 2 * (1.0 / beta0 - 1.0 / beta_t) - 1.0 / beta0


def _lambda_at(intensity, t: int) -> float:
    if np.ndim(intensity) == 0:
        return float(intensity)
    return float(intensity[t])


def variance_recursion(spec: RegimeSpec, intensity, horizon: int) -> list[float]:
    """Exact unconditional Var(Theta_t) for t = 1..horizon, every period observed.

    Deterministic moment recursion: with V_t = Var(Theta_t) and the
    filtered rate beta_t (which never depends on the counts),

        V_1     = 1 / beta0
        V_{t+1} = (1/q_rate) (1/beta_t) + (q_shape/q_rate)^2 (V_t - 1/beta_t)

    `intensity` is a scalar or a sequence of at least `horizon` values.
    """
    if horizon < 1:
        raise DomainError(f"horizon must be >= 1, got {horizon}")
    beta0 = spec.beta0
    out = [1.0 / beta0]
    if spec.kind is RegimeKind.INDEPENDENT:
        return out * horizon
    beta = beta0 + _lambda_at(intensity, 0)
    for t in range(1, horizon):
        q1, q2 = q_pair(spec, ScheduleContext(beta=beta))
        v_next = (1.0 / q2) * (1.0 / beta) + (q1 / q2) ** 2 * (out[-1] - 1.0 / beta)
        out.append(v_next)
        beta = q2 * beta + _lambda_at(intensity, t)
    return out


def schedule_pairs(spec: RegimeSpec, intensities) -> list[tuple[float, float]]:
    """Precompute the (q_shape, q_rate) pair for the predict step out of each period.

    Runs the deterministic rate recursion on the given per-period
    intensities (all periods treated as observed); used for the pooled
    constant-variance option where one shared schedule must apply to
    every series.  Returns one pair per period: pairs[t] is consumed when
    predicting from period t+1 to t+2 (1-based), and the final entry is
    the pair for forecasting past the last period.
    """
    lams = [float(v) for v in intensities]
    pairs: list[tuple[float, float]] = []
    if not lams:
        return pairs
    beta = spec.beta0 + lams[0]
    for t in range(len(lams)):
        q1, q2 = q_pair(spec, ScheduleContext(beta=beta))
        pairs.append((q1, q2))
        if t + 1 < len(lams):
            beta = q2 * beta + lams[t + 1]
    return pairs
