"""Forward simulation of (Theta_t, Y_t) paths and the long-run study harness.

The latent update is the stochastic representation

    Theta_{t+1} = Theta_t * B_{t+1} / q_rate + eta_{t+1},

with B ~ Beta(q_shape * a_t, (1 - q_shape) * a_t) and
eta ~ Gamma((q_rate - q_shape) * b_t, q_rate * b_t), conditionally
independent given the history; (a_t, b_t) are the filtered posterior
parameters, so the simulator runs the filter alongside the path rather
than duplicating its recursions.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dist import BetaLaw, DomainError, GammaLaw, rng_stream, sample_beta, sample_gamma, sample_poisson
from .filtering import FilterState, Observation, init_state, predict, update
from .regimes import RegimeKind, RegimeSpec, ScheduleContext, q_pair, variance_recursion

__all__ = [
    "SimPath",
    "SimStudyConfig",
    "StudyResult",
    "step_theta",
    "simulate_path",
    "run_study",
    "write_study_csv",
]


@dataclass(frozen=True)
class SimPath:
    """One simulated trajectory: latent factors and counts, index t = 1..T."""

    theta: np.ndarray
    counts: np.ndarray


@dataclass(frozen=True)
class SimStudyConfig:
    regime: RegimeSpec
    horizon: int
    n_paths: int
    intensity: float | Sequence[float] = 1.0
    seed: int = 0
    density_times: tuple[int, ...] = (1, 5, 20, 50)
    trajectory_paths: int = 4

    def __post_init__(self):
        if self.horizon < 1:
            raise DomainError(f"horizon must be >= 1, got {self.horizon}")
        if self.n_paths < 1:
            raise DomainError(f"n_paths must be >= 1, got {self.n_paths}")

    def intensities(self) -> list[float]:
        if np.ndim(self.intensity) == 0:
            return [float(self.intensity)] * self.horizon
        vals = [float(v) for v in self.intensity]
        if len(vals) < self.horizon:
            raise DomainError("intensity sequence shorter than the horizon")
        return vals[: self.horizon]


def step_theta(
    theta: float,
    post: GammaLaw,
    q_shape: float,
    q_rate: float,
    rng: np.random.Generator,
) -> float:
    """One latent transition given the current posterior law.

    The endpoint conventions fall out of the degenerate laws: q_shape = 1
    makes B the constant 1, q_shape = 0 the constant 0, and
    q_shape = q_rate removes the renewal term entirely.
    """
    if not (0.0 <= q_shape <= q_rate <= 1.0 and q_rate > 0.0):
        raise DomainError(
            f"need 0 <= q_shape <= q_rate <= 1 with q_rate > 0, got ({q_shape}, {q_rate})"
        )
    b_draw = sample_beta(BetaLaw(q_shape * post.shape, (1.0 - q_shape) * post.shape), rng)
    if q_rate == q_shape:
        eta = 0.0
    else:
        eta = sample_gamma(GammaLaw((q_rate - q_shape) * post.rate, q_rate * post.rate), rng)
    return theta * b_draw / q_rate + eta


def simulate_path(
    regime: RegimeSpec,
    intensities: Sequence[float],
    rng: np.random.Generator,
) -> SimPath:
    """Simulate one trajectory of length len(intensities), fully observed."""
    lams = [float(v) for v in intensities]
    if not lams:
        raise DomainError("need at least one intensity")
    horizon = len(lams)
    prior = GammaLaw(regime.beta0, regime.beta0)
    theta = np.empty(horizon)
    counts = np.empty(horizon, dtype=np.int64)
    theta[0] = sample_gamma(prior, rng)
    state = init_state(regime.beta0)
    for t in range(horizon):
        counts[t] = sample_poisson(lams[t] * theta[t], rng)
        state = update(state, Observation(count=int(counts[t]), intensity=lams[t]))
        if t + 1 < horizon:
            if regime.kind is RegimeKind.INDEPENDENT:
                theta[t + 1] = sample_gamma(prior, rng)
                state = FilterState(t=t + 2, pred=prior)
            else:
                q1, q2 = q_pair(regime, ScheduleContext(beta=state.post.rate))
                theta[t + 1] = step_theta(theta[t], state.post, q1, q2, rng)
                state = predict(state, q1, q2)
    return SimPath(theta=theta, counts=counts)


def _silverman_bandwidth(x: np.ndarray) -> float:
    if len(x) < 2:
        return 1.0
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75.0, 25.0])
    iqr = float(q75 - q25)
    candidates = [v for v in (sd, iqr / 1.34) if v > 0.0]
    if not candidates:
        return 1.0
    return 0.9 * min(candidates) * len(x) ** (-0.2)


def gaussian_kde_curve(x: np.ndarray, gridsize: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-kernel density with the Silverman rule-of-thumb bandwidth."""
    h = _silverman_bandwidth(x)
    lo = max(0.0, float(np.min(x)) - 3.0 * h)
    hi = float(np.max(x)) + 3.0 * h
    if hi <= lo:
        hi = lo + 1.0
    grid = np.linspace(lo, hi, gridsize)
    z = (grid[:, None] - x[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (len(x) * h * math.sqrt(2.0 * math.pi))
    return grid, dens


@dataclass(frozen=True)
class StudyResult:
    """Moments, densities, and sample trajectories from a simulation study."""

    config: SimStudyConfig
    theta: np.ndarray  # (n_paths, horizon)
    counts: np.ndarray
    mean: np.ndarray  # per t
    var: np.ndarray  # per t, ddof=1
    se_mean: np.ndarray
    se_var: np.ndarray
    exact_var: np.ndarray  # deterministic moment recursion
    densities: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def _variance_se(x: np.ndarray) -> float:
    # Var(s^2) = (m4 - (n-3)/(n-1) * s^4) / n with central sample moments.
    n = len(x)
    if n < 2:
        return float("inf")
    centered = x - x.mean()
    m4 = float(np.mean(centered**4))
    s2 = float(np.var(x, ddof=1))
    v = (m4 - (n - 3.0) / (n - 1.0) * s2 * s2) / n
    return math.sqrt(max(v, 0.0))


def run_study(config: SimStudyConfig, out_dir: str | Path | None = None) -> StudyResult:
    """Simulate n_paths independent trajectories and summarize them.

    Every path draws from its own counter-based stream keyed by
    (seed, path index), so results do not depend on execution order.
    """
    lams = config.intensities()
    horizon = config.horizon
    theta = np.empty((config.n_paths, horizon))
    counts = np.empty((config.n_paths, horizon), dtype=np.int64)
    for i in range(config.n_paths):
        path = simulate_path(config.regime, lams, rng_stream(config.seed, i))
        theta[i] = path.theta
        counts[i] = path.counts

    mean = theta.mean(axis=0)
    if config.n_paths > 1:
        var = theta.var(axis=0, ddof=1)
        se_mean = theta.std(axis=0, ddof=1) / math.sqrt(config.n_paths)
        se_var = np.array([_variance_se(theta[:, t]) for t in range(horizon)])
    else:
        var = np.zeros(horizon)
        se_mean = np.full(horizon, float("inf"))
        se_var = np.full(horizon, float("inf"))
    exact = np.asarray(variance_recursion(config.regime, lams, horizon))
    densities = {
        t: gaussian_kde_curve(theta[:, t - 1])
        for t in config.density_times
        if 1 <= t <= horizon
    }
    result = StudyResult(
        config=config,
        theta=theta,
        counts=counts,
        mean=mean,
        var=var,
        se_mean=se_mean,
        se_var=se_var,
        exact_var=exact,
        densities=densities,
    )
    if out_dir is not None:
        write_study_csv(result, out_dir)
    return result


def _study_header(config: SimStudyConfig) -> list[str]:
    spec = config.regime
    parts = [f"regime={spec.kind.value}", f"beta0={spec.beta0!r}"]
    if spec.p is not None:
        parts.append(f"p={spec.p!r}")
    if spec.q is not None:
        parts.append(f"q={spec.q!r}")
    return [
        "# countssm simulation study",
        "# schema_version=1",
        "# " + " ".join(parts),
        f"# horizon={config.horizon} n_paths={config.n_paths} seed={config.seed}",
    ]


def write_study_csv(result: StudyResult, out_dir: str | Path) -> None:
    """Write trajectories.csv, moments.csv and density.csv into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = _study_header(result.config)

    n_show = min(result.config.trajectory_paths, result.config.n_paths)
    with open(out / "trajectories.csv", "w", newline="") as fh:
        for line in header:
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["path_id", "t", "theta", "y"])
        for i in range(n_show):
            for t in range(result.config.horizon):
                writer.writerow([i, t + 1, repr(float(result.theta[i, t])), int(result.counts[i, t])])

    with open(out / "moments.csv", "w", newline="") as fh:
        for line in header:
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["t", "mean", "var", "se"])
        for t in range(result.config.horizon):
            writer.writerow(
                [t + 1, repr(float(result.mean[t])), repr(float(result.var[t])), repr(float(result.se_mean[t]))]
            )

    with open(out / "density.csv", "w", newline="") as fh:
        for line in header:
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["t", "grid", "density"])
        for t in sorted(result.densities):
            grid, dens = result.densities[t]
            for g, d in zip(grid, dens):
                writer.writerow([t, repr(float(g)), repr(float(d))])
