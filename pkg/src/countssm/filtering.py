"""Exact Poisson-gamma filter for one count series.

The recursion alternates predict and update.  `init_state` produces the
time-1 predictive law Gamma(beta0, beta0) directly; each period then
contributes one negative-binomial predictive density, an update with the
observed count (or a pass-through when the count is missing), and a
predict step governed by the regime's (q_shape, q_rate) pair.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .dist import DomainError, GammaLaw, NBLaw, nb_log_pmf
from .regimes import RegimeKind, RegimeSpec, ScheduleContext, q_pair

__all__ = [
    "Observation",
    "FilterState",
    "FilterStep",
    "FilterTrace",
    "init_state",
    "update",
    "predict",
    "predictive_law",
    "predictive_mean",
    "run_filter",
    "forecast_mean",
]


@dataclass(frozen=True)
class Observation:
    """One period of one series: a count (None when missing) and its intensity.

    The intensity is already exposure-adjusted and must be positive even
    for missing periods, because the rate recursion consumes it.
    """

    count: Optional[int]
    intensity: float

    def __post_init__(self):
        if not self.intensity > 0.0:
            raise DomainError(f"intensity must be > 0, got {self.intensity}")
        if self.count is not None and (self.count < 0 or self.count != int(self.count)):
            raise DomainError(f"count must be a nonnegative integer or None, got {self.count!r}")

    @property
    def observed(self) -> bool:
        return self.count is not None


@dataclass(frozen=True)
class FilterState:
    """Recursion state at time t: predictive law, and posterior once updated."""

    t: int
    pred: GammaLaw
    post: Optional[GammaLaw] = None


def init_state(beta0: float) -> FilterState:
    """Time-1 state with predictive law Gamma(beta0, beta0), prior mean 1."""
    if not beta0 > 0.0:
        raise DomainError(f"beta0 must be > 0, got {beta0}")
    return FilterState(t=1, pred=GammaLaw(beta0, beta0))


def update(state: FilterState, obs: Observation) -> FilterState:
    """Condition on the period's count: add (count, intensity) to (shape, rate).

    A missing count leaves the law unchanged.
    """
    pred = state.pred
    if obs.observed:
        post = GammaLaw(pred.shape + obs.count, pred.rate + obs.intensity)
    else:
        post = pred
    return FilterState(t=state.t, pred=pred, post=post)


def predict(state: FilterState, q_shape: float, q_rate: float) -> FilterState:
    """Advance the posterior one period under the pair (q_shape, q_rate)."""
    if state.post is None:
        raise DomainError("predict requires an updated state (call update first)")
    if not (0.0 <= q_shape <= q_rate <= 1.0 and q_rate > 0.0):
        raise DomainError(
            f"need 0 <= q_shape <= q_rate <= 1 with q_rate > 0, got ({q_shape}, {q_rate})"
        )
    a, b = state.post.shape, state.post.rate
    pred = GammaLaw(q_shape * a + (q_rate - q_shape) * b, q_rate * b)
    return FilterState(t=state.t + 1, pred=pred)


def predictive_law(state: FilterState, intensity: float) -> NBLaw:
    """One-step-ahead count distribution for the given intensity."""
    return NBLaw(mean=intensity * state.pred.shape / state.pred.rate, size=state.pred.shape)


def predictive_mean(state: FilterState, intensity: float) -> float:
    """One-step-ahead expected count: intensity times the predictive state mean."""
    return intensity * state.pred.shape / state.pred.rate


@dataclass(frozen=True)
class FilterStep:
    pred: GammaLaw
    post: GammaLaw
    predictive: NBLaw
    loglik: Optional[float]  # None when the count was missing


@dataclass(frozen=True)
class FilterTrace:
    """Per-step record of one filtered series plus the summed log-likelihood."""

    steps: tuple[FilterStep, ...]
    loglik: float
    final_state: FilterState


def _reset_state(t: int, beta0: float) -> FilterState:
    return FilterState(t=t, pred=GammaLaw(beta0, beta0))


def run_filter(
    series: Sequence[Observation],
    regime: RegimeSpec,
    schedule: Sequence[tuple[float, float]] | None = None,
) -> FilterTrace:
    """Filter a whole series under a regime.

    `schedule`, when given, supplies the (q_shape, q_rate) pair for each
    predict step instead of the regime's own rule (used for pooled
    constant-variance schedules); the independent regime ignores it and
    resets to the prior between periods.

    The time-ordered running sum of the observed steps' log predictive
    densities is the series' log-likelihood contribution.
    """
    obs_list = tuple(series)
    if not obs_list:
        raise DomainError("series must contain at least one observation")
    state = init_state(regime.beta0)
    steps: list[FilterStep] = []
    loglik = 0.0
    for idx, obs in enumerate(obs_list):
        law = predictive_law(state, obs.intensity)
        contrib = nb_log_pmf(obs.count, law) if obs.observed else None
        state = update(state, obs)
        steps.append(FilterStep(pred=state.pred, post=state.post, predictive=law, loglik=contrib))
        if contrib is not None:
            loglik = loglik + contrib
        if idx + 1 < len(obs_list):
            if regime.kind is RegimeKind.INDEPENDENT:
                state = _reset_state(state.t + 1, regime.beta0)
            elif schedule is not None:
                q1, q2 = schedule[idx]
                state = predict(state, q1, q2)
            else:
                q1, q2 = q_pair(regime, ScheduleContext(beta=state.post.rate))
                state = predict(state, q1, q2)
    return FilterTrace(steps=tuple(steps), loglik=loglik, final_state=state)


def forecast_mean(
    trace: FilterTrace,
    regime: RegimeSpec,
    intensity: float,
    pair: tuple[float, float] | None = None,
) -> float:
    """Expected count one period past the end of a filtered series.

    `pair` overrides the regime's own (q_shape, q_rate) for the final
    predict step (used with pooled schedules).
    """
    state = trace.final_state
    if regime.kind is RegimeKind.INDEPENDENT:
        nxt = _reset_state(state.t + 1, regime.beta0)
    else:
        q1, q2 = pair if pair is not None else q_pair(regime, ScheduleContext(beta=state.post.rate))
        nxt = predict(state, q1, q2)
    return predictive_mean(nxt, intensity)


def exact_sum(values) -> float:
    """Exactly rounded float sum; permutation invariant."""
    return math.fsum(values)
