"""Panel log-likelihood, dynamics estimation, and model comparison.

Step 2 of the two-step estimator: with intensities fixed from the
regression step, maximize the panel log-likelihood over the regime's
free parameters (beta0, and p/q where applicable) with a derivative-free
simplex search on transformed coordinates (log for beta0, logit for p
and q), multi-started from a fixed grid.

Likelihood evaluation comes in two forms that agree bit for bit: the
reference path filters each series through `run_filter`, while the
kernel used inside optimization loops runs the same recursion vectorized
across series.  Both accumulate each series in time order and combine
series with an exactly rounded sum, so totals are independent of series
order and of how work is threaded.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, special

from .dist import DomainError, nb_logpmf_raw
from .filtering import Observation, exact_sum, run_filter
from .io import Panel
from .regimes import FREE_PARAMS, RegimeKind, RegimeSpec, constant_variance_q2, schedule_pairs
from .regression import DesignRow, EstimationError, GlmFit, LINPRED_CAP, fit_nb_glm

__all__ = [
    "FitOptions",
    "DynamicsFit",
    "TwoStepResult",
    "panel_loglik",
    "fit_dynamics",
    "compare_models",
    "two_step",
    "intensities_from_eta",
    "intensities_from_fit",
    "pooled_schedule",
    "joint_refit",
    "glm_rows",
]

Intensities = Mapping[str, Sequence[float]]


@dataclass(frozen=True)
class FitOptions:
    """Knobs for the dynamics search and the information criteria."""

    n_regression_params: int = 0
    bic_n: str = "observations"  # or "series"
    pooled_constant: bool = False
    beta0_grid: tuple[float, ...] = (0.25, 1.0, 4.0)
    p_grid: tuple[float, ...] = (0.3, 0.7, 0.95)
    q_grid: tuple[float, ...] = (0.3, 0.7, 0.95)
    xatol: float = 1e-6
    fatol: float = 1e-9
    maxiter: int = 2000
    boundary_threshold: float = 8.0  # |transformed coordinate| beyond which we flag


@dataclass(frozen=True)
class DynamicsFit:
    """Fitted dynamics for one regime, with information criteria."""

    regime: RegimeSpec
    loglik: float
    k: int
    n_obs: int
    aic: float
    bic: float
    boundary_flags: tuple[str, ...] = ()
    starts: int = 0
    evaluations: int = 0
    pooled_constant: bool = False


# ---------------------------------------------------------------------------
# Packing and the vectorized likelihood kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Packed:
    n: int
    t_max: int
    y: np.ndarray  # (n, t_max) counts as floats, 0 where not observed
    observed: np.ndarray  # (n, t_max) bool
    active: np.ndarray  # (n, t_max) bool: record exists
    lam: np.ndarray  # (n, t_max) intensity, 1 where no record
    n_observed: int
    mean_lam: np.ndarray  # (t_max,) mean intensity over active series per period


def _check_intensities(panel: Panel, intensities: Intensities) -> None:
    for s in panel.series:
        lam = intensities.get(s.id)
        if lam is None:
            raise EstimationError(f"no intensities for series {s.id!r}")
        if len(lam) != len(s.records):
            raise EstimationError(
                f"series {s.id!r}: {len(lam)} intensities for {len(s.records)} records"
            )


def _pack(panel: Panel, intensities: Intensities) -> _Packed:
    _check_intensities(panel, intensities)
    n = len(panel.series)
    if n == 0:
        raise EstimationError("empty panel")
    t_max = max(len(s) for s in panel.series)
    y = np.zeros((n, t_max))
    observed = np.zeros((n, t_max), dtype=bool)
    active = np.zeros((n, t_max), dtype=bool)
    lam = np.ones((n, t_max))
    for i, s in enumerate(panel.series):
        lam_i = np.asarray(intensities[s.id], dtype=float)
        if not np.all(lam_i > 0.0):
            raise EstimationError(f"series {s.id!r}: intensities must be positive")
        ti = len(s.records)
        active[i, :ti] = True
        lam[i, :ti] = lam_i
        for t, rec in enumerate(s.records):
            if rec.count is not None:
                observed[i, t] = True
                y[i, t] = float(rec.count)
    counts_active = active.sum(axis=0)
    mean_lam = np.where(counts_active > 0, (lam * active).sum(axis=0) / np.maximum(counts_active, 1), 1.0)
    return _Packed(
        n=n,
        t_max=t_max,
        y=y,
        observed=observed,
        active=active,
        lam=lam,
        n_observed=int(observed.sum()),
        mean_lam=mean_lam,
    )


def _pooled_pairs(spec: RegimeSpec, packed: _Packed) -> list[tuple[float, float]] | None:
    if spec.kind is not RegimeKind.CONSTANT_VARIANCE:
        return None
    return schedule_pairs(spec, packed.mean_lam.tolist())


def _kernel_series_logliks(
    packed: _Packed,
    spec: RegimeSpec,
    pooled_pairs: Sequence[tuple[float, float]] | None = None,
) -> np.ndarray:
    """Per-series log-likelihoods, vectorized across series.

    Performs exactly the scalar filter's operations elementwise (same
    expressions, same time order), so each entry equals the corresponding
    `run_filter(...).loglik` bit for bit.
    """
    kind = spec.kind
    beta0 = spec.beta0
    a = np.full(packed.n, beta0)
    b = np.full(packed.n, beta0)
    ll = np.zeros(packed.n)
    for t in range(packed.t_max):
        lam_t = packed.lam[:, t]
        y_t = packed.y[:, t]
        obs_t = packed.observed[:, t]
        mean = lam_t * a / b
        contrib = nb_logpmf_raw(y_t, mean, a)
        ll = ll + np.where(obs_t, contrib, 0.0)
        a_post = np.where(obs_t, a + y_t, a)
        b_post = np.where(obs_t, b + lam_t, b)
        if t + 1 < packed.t_max:
            if kind is RegimeKind.INDEPENDENT:
                a = np.full(packed.n, beta0)
                b = np.full(packed.n, beta0)
            else:
                if pooled_pairs is not None:
                    q1, q2 = pooled_pairs[t]
                elif kind is RegimeKind.SHARED:
                    q1, q2 = 1.0, 1.0
                elif kind is RegimeKind.INCREASING:
                    q1, q2 = spec.q, spec.q
                elif kind is RegimeKind.DECREASING:
                    q1, q2 = spec.p, 1.0
                elif kind in (RegimeKind.CONVERGING, RegimeKind.BOUNDED):
                    q1, q2 = spec.p * spec.q, spec.q
                else:  # constant variance, per-series rate
                    q2 = constant_variance_q2(beta0, spec.p, b_post)
                    q1 = spec.p * q2
                a = q1 * a_post + (q2 - q1) * b_post
                b = q2 * b_post
    return ll


def _kernel_loglik(packed: _Packed, spec: RegimeSpec, pooled: bool) -> float:
    pairs = _pooled_pairs(spec, packed) if pooled else None
    return exact_sum(_kernel_series_logliks(packed, spec, pairs).tolist())


# ---------------------------------------------------------------------------
# Public likelihood (reference path through run_filter)
# ---------------------------------------------------------------------------


def _series_observations(series, lam) -> list[Observation]:
    return [
        Observation(count=rec.count, intensity=float(lam[t]))
        for t, rec in enumerate(series.records)
    ]


def panel_loglik(
    panel: Panel,
    intensities: Intensities,
    regime: RegimeSpec,
    *,
    pooled_constant: bool = False,
    threads: int = 1,
) -> float:
    """Sum of per-series filtered log-likelihoods.

    Series are filtered independently and combined with an exactly
    rounded sum, so the value does not depend on series order or on the
    thread count.
    """
    _check_intensities(panel, intensities)
    pairs = None
    if pooled_constant and regime.kind is RegimeKind.CONSTANT_VARIANCE:
        pairs = _pooled_pairs(regime, _pack(panel, intensities))

    def one(series) -> float:
        obs = _series_observations(series, intensities[series.id])
        return run_filter(obs, regime, schedule=pairs).loglik

    if threads > 1 and len(panel.series) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, panel.series))
    else:
        parts = [one(s) for s in panel.series]
    return exact_sum(parts)


# ---------------------------------------------------------------------------
# Dynamics optimization
# ---------------------------------------------------------------------------


def _to_z(name: str, value: float) -> float:
    if name == "beta0":
        return math.log(value)
    # grid values of exactly 0 or 1 become near-boundary starts
    return float(special.logit(min(max(value, 1e-12), 1.0 - 1e-12)))


def _from_z(name: str, z: float) -> float:
    if name == "beta0":
        return math.exp(min(max(z, -100.0), 100.0))
    return float(special.expit(z))


def _spec_from_z(kind: RegimeKind, names: tuple[str, ...], z: np.ndarray) -> RegimeSpec:
    params = {name: _from_z(name, float(zi)) for name, zi in zip(names, z)}
    return RegimeSpec(
        kind=kind,
        beta0=params["beta0"],
        p=params.get("p"),
        q=params.get("q"),
    )


def _start_grid(names: tuple[str, ...], options: FitOptions) -> list[tuple[float, ...]]:
    grids = {
        "beta0": options.beta0_grid,
        "p": options.p_grid,
        "q": options.q_grid,
    }
    axes = [[_to_z(name, v) for v in grids[name]] for name in names]
    return list(itertools.product(*axes))


def fit_dynamics(
    panel: Panel,
    intensities: Intensities,
    kind: RegimeKind | str,
    options: FitOptions = FitOptions(),
) -> DynamicsFit:
    """Maximize the panel log-likelihood over the regime's free parameters.

    Multi-start Nelder-Mead on transformed coordinates; a coordinate that
    ends up beyond the boundary threshold is reported as a boundary flag
    (direction included, e.g. ``p->1``).
    """
    kind = RegimeKind(kind)
    names = FREE_PARAMS[kind]
    packed = _pack(panel, intensities)
    pooled = options.pooled_constant and kind is RegimeKind.CONSTANT_VARIANCE
    evaluations = 0

    def objective(z: np.ndarray) -> float:
        nonlocal evaluations
        evaluations += 1
        try:
            spec = _spec_from_z(kind, names, z)
            value = _kernel_loglik(packed, spec, pooled)
        except (DomainError, FloatingPointError, OverflowError):
            return float("inf")
        return -value if math.isfinite(value) else float("inf")

    best = None
    starts = _start_grid(names, options)
    for z0 in starts:
        res = optimize.minimize(
            objective,
            np.asarray(z0, dtype=float),
            method="Nelder-Mead",
            options={
                "xatol": options.xatol,
                "fatol": options.fatol,
                "maxiter": options.maxiter,
                "maxfev": 2 * options.maxiter,
            },
        )
        if math.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise EstimationError(f"all {len(starts)} starts diverged for regime {kind.value!r}")

    z_opt = np.asarray(best.x, dtype=float)
    spec = _spec_from_z(kind, names, z_opt)
    loglik = _kernel_loglik(packed, spec, pooled)
    flags = []
    for name, zi in zip(names, z_opt):
        if abs(zi) > options.boundary_threshold:
            if name == "beta0":
                flags.append("beta0->inf" if zi > 0 else "beta0->0")
            else:
                flags.append(f"{name}->1" if zi > 0 else f"{name}->0")
    k_total = options.n_regression_params + len(names)
    n_obs = packed.n_observed if options.bic_n == "observations" else packed.n
    if n_obs <= 0:
        raise EstimationError("no observed counts in the panel")
    return DynamicsFit(
        regime=spec,
        loglik=loglik,
        k=k_total,
        n_obs=n_obs,
        aic=-2.0 * loglik + 2.0 * k_total,
        bic=-2.0 * loglik + k_total * math.log(n_obs),
        boundary_flags=tuple(flags),
        starts=len(starts),
        evaluations=evaluations,
        pooled_constant=pooled,
    )


def compare_models(
    panel: Panel,
    intensities: Intensities,
    kinds: Sequence[RegimeKind | str],
    options: FitOptions = FitOptions(),
) -> list[DynamicsFit]:
    """Fit every requested regime and rank by AIC (ascending)."""
    if not kinds:
        raise EstimationError("no regimes requested")
    fits = [fit_dynamics(panel, intensities, kind, options) for kind in kinds]
    return sorted(fits, key=lambda f: f.aic)


# ---------------------------------------------------------------------------
# Two-step orchestration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TwoStepResult:
    glm: GlmFit
    fits: tuple[DynamicsFit, ...]  # in the requested regime order
    intensities: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def intensities_from_eta(panel: Panel, encoded, eta: np.ndarray) -> dict[str, np.ndarray]:
    """Per-series intensity paths exposure * exp(x . eta)."""
    xb = encoded.x @ np.asarray(eta, dtype=float)
    too_big = xb > LINPRED_CAP
    if np.any(too_big):
        i = int(np.argmax(too_big))
        raise EstimationError(
            f"linear predictor {xb[i]:.1f} exceeds the overflow cap {LINPRED_CAP}"
        )
    lam_rows = encoded.exposure * np.exp(np.maximum(xb, -LINPRED_CAP))
    out = {s.id: np.empty(len(s.records)) for s in panel.series}
    for (si, ri), lam in zip(encoded.index, lam_rows):
        out[panel.series[si].id][ri] = lam
    return out


def intensities_from_fit(panel: Panel, encoded, glm: GlmFit) -> dict[str, np.ndarray]:
    """Per-series intensity paths from the step-1 fit."""
    return intensities_from_eta(panel, encoded, glm.eta)


def pooled_schedule(panel: Panel, intensities: Intensities, regime: RegimeSpec):
    """The shared (q_shape, q_rate) pairs for a pooled constant-variance fit.

    One pair per period index, computed from the cross-sectional mean
    intensity path; the final entry serves the forecast step.
    """
    packed = _pack(panel, intensities)
    return schedule_pairs(regime, packed.mean_lam.tolist())


def glm_rows(encoded) -> list[DesignRow]:
    """Observed records as regression rows (missing counts are excluded)."""
    return [
        DesignRow(x=tuple(x), exposure=float(e), y=int(c))
        for x, e, c in zip(encoded.x, encoded.exposure, encoded.counts)
        if c is not None
    ]

def two_step(
    panel: Panel,
    encoded,
    kinds: Sequence[RegimeKind | str],
    options: FitOptions = FitOptions(),
    glm_tol: float = 1e-8,
    glm_max_iter: int = 100,
) -> TwoStepResult:
    """Step 1 (marginal NB GLM) then step 2 (dynamics per regime)."""
    glm = fit_nb_glm(glm_rows(encoded), tol=glm_tol, max_iter=glm_max_iter, names=encoded.coding.names)
    lam = intensities_from_fit(panel, encoded, glm)
    opts = replace(options, n_regression_params=len(glm.eta))
    fits = tuple(fit_dynamics(panel, lam, kind, opts) for kind in kinds)
    return TwoStepResult(glm=glm, fits=fits, intensities=lam)


def joint_refit(
    panel: Panel,
    encoded,
    start: TwoStepResult,
    kind: RegimeKind | str,
    options: FitOptions = FitOptions(),
    maxiter: int = 5000,
) -> tuple[np.ndarray, DynamicsFit]:
    """One-step MLE over (eta, dynamics) from the two-step solution.

    Optional refinement; the simplex search in d + dyn dimensions is slow
    and can stall, which is why the two-step route is the default.
    """
    kind = RegimeKind(kind)
    names = FREE_PARAMS[kind]
    start_fit = next((f for f in start.fits if f.regime.kind is kind), None)
    if start_fit is None:
        raise EstimationError(f"two-step result has no fit for regime {kind.value!r}")
    spec0 = start_fit.regime
    d = len(start.glm.eta)
    z_dyn0 = [_to_z(name, getattr(spec0, name)) for name in names]
    z0 = np.concatenate([start.glm.eta, z_dyn0])
    pooled = options.pooled_constant and kind is RegimeKind.CONSTANT_VARIANCE

    def objective(z: np.ndarray) -> float:
        eta = z[:d]
        xb = encoded.x @ eta
        if np.any(xb > LINPRED_CAP):
            return float("inf")
        lam_rows = encoded.exposure * np.exp(np.maximum(xb, -LINPRED_CAP))
        lam = {s.id: np.empty(len(s.records)) for s in panel.series}
        for (si, ri), v in zip(encoded.index, lam_rows):
            lam[panel.series[si].id][ri] = v
        try:
            spec = _spec_from_z(kind, names, z[d:])
            packed = _pack(panel, lam)
            value = _kernel_loglik(packed, spec, pooled)
        except (DomainError, EstimationError, FloatingPointError, OverflowError):
            return float("inf")
        return -value if math.isfinite(value) else float("inf")

    res = optimize.minimize(
        objective,
        z0,
        method="Nelder-Mead",
        options={"xatol": options.xatol, "fatol": options.fatol, "maxiter": maxiter, "maxfev": 2 * maxiter},
    )
    if not math.isfinite(res.fun):
        raise EstimationError("joint refit diverged")
    eta = np.asarray(res.x[:d], dtype=float)
    spec = _spec_from_z(kind, names, np.asarray(res.x[d:]))
    lam_rows = encoded.exposure * np.exp(np.minimum(encoded.x @ eta, LINPRED_CAP))
    lam = {s.id: np.empty(len(s.records)) for s in panel.series}
    for (si, ri), v in zip(encoded.index, lam_rows):
        lam[panel.series[si].id][ri] = v
    packed = _pack(panel, lam)
    loglik = _kernel_loglik(packed, spec, pooled)
    k_total = d + len(names)
    n_obs = packed.n_observed if options.bic_n == "observations" else packed.n
    fit = DynamicsFit(
        regime=spec,
        loglik=loglik,
        k=k_total,
        n_obs=n_obs,
        aic=-2.0 * loglik + 2.0 * k_total,
        bic=-2.0 * loglik + k_total * math.log(n_obs),
        starts=1,
        evaluations=int(res.nfev),
        pooled_constant=pooled,
    )
    return eta, fit
