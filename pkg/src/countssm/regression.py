"""Negative-binomial GLM with log link and exposure offset.

Step 1 of the two-step estimator: fit the marginal mean model
lambda = exposure * exp(x . eta), ignoring serial correlation.  The NB
dispersion here is a nuisance parameter (only eta feeds step 2); it is
profiled out by golden-section search on its log.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from .dist import DomainError, nb_logpmf_raw

__all__ = ["DesignRow", "GlmFit", "EstimationError", "fit_nb_glm", "intensity"]

LINPRED_CAP = 700.0  # exp() overflows just above this


class EstimationError(RuntimeError):
    """An estimation routine failed in a way the caller must handle."""


@dataclass(frozen=True)
class DesignRow:
    """One response row: covariate vector, exposure, count."""

    x: tuple[float, ...]
    exposure: float
    y: int

    def __post_init__(self):
        if not self.exposure > 0.0:
            raise DomainError(f"exposure must be > 0, got {self.exposure}")
        if self.y < 0 or self.y != int(self.y):
            raise DomainError(f"count must be a nonnegative integer, got {self.y!r}")
        if not all(math.isfinite(v) for v in self.x):
            raise DomainError(f"covariates must be finite, got {self.x!r}")


@dataclass(frozen=True)
class GlmFit:
    eta: np.ndarray
    dispersion: float
    loglik: float
    converged: bool
    iterations: int
    score_norm: float
    condition: float  # condition number of the weighted information matrix
    names: tuple[str, ...] | None = None


def _nb_loglik(y: np.ndarray, mu: np.ndarray, size: float) -> float:
    return float(np.sum(nb_logpmf_raw(y, mu, size)))


def _check_rank(x: np.ndarray, names: Sequence[str] | None) -> None:
    _, r, piv = linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(x.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank < x.shape[1]:
        bad = sorted(piv[rank:])
        labels = [names[j] if names is not None else f"column {j}" for j in bad]
        raise EstimationError(f"design matrix is rank deficient; offending columns: {labels}")


def _profile_dispersion(y: np.ndarray, mu: np.ndarray, lo: float = -12.0, hi: float = 25.0) -> float:
    """Golden-section maximization of the NB log-likelihood over log dispersion."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0

    def value(logr: float) -> float:
        return _nb_loglik(y, mu, math.exp(logr))

    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = value(c), value(d)
    for _ in range(80):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = value(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = value(d)
    return math.exp((a + b) / 2.0)


def fit_nb_glm(
    rows: Sequence[DesignRow],
    tol: float = 1e-8,
    max_iter: int = 100,
    names: Sequence[str] | None = None,
) -> GlmFit:
    """Joint MLE of (eta, dispersion) by alternating IRLS and dispersion profiling.

    Convergence means the eta score norm is at or below `tol`; otherwise
    the fit is returned with converged=False.
    """
    if not rows:
        raise EstimationError("no rows to fit")
    x = np.asarray([r.x for r in rows], dtype=float)
    y = np.asarray([r.y for r in rows], dtype=float)
    offset = np.log(np.asarray([r.exposure for r in rows], dtype=float))
    n, d = x.shape
    if n <= d:
        raise EstimationError(f"need more rows than parameters, got n={n}, d={d}")
    if names is not None and len(names) != d:
        raise EstimationError(f"got {len(names)} names for {d} columns")
    _check_rank(x, names)

    # Least squares on the log scale is a robust starting point.
    z0 = np.log(y + 0.5) - offset
    eta, *_ = np.linalg.lstsq(x, z0, rcond=None)
    size = 10.0

    def mean_of(e: np.ndarray) -> np.ndarray:
        lin = np.clip(x @ e + offset, -LINPRED_CAP, LINPRED_CAP)
        return np.exp(lin)

    def score_of(e: np.ndarray, r: float) -> np.ndarray:
        mu = mean_of(e)
        return x.T @ ((y - mu) * r / (r + mu))

    iterations = 0
    converged = False
    info = np.eye(d)
    for _ in range(max_iter):
        iterations += 1
        # IRLS step for eta at the current dispersion.
        mu = mean_of(eta)
        w = mu * size / (size + mu)
        z = (x @ eta) + (y - mu) / mu
        info = x.T @ (w[:, None] * x)
        try:
            eta_new = np.linalg.solve(info, x.T @ (w * z))
        except np.linalg.LinAlgError as exc:
            raise EstimationError(f"weighted least-squares step failed: {exc}") from exc
        eta = eta_new
        # Dispersion profile at the refreshed means.
        size_new = _profile_dispersion(y, mean_of(eta))
        size_change = abs(math.log(size_new) - math.log(size))
        size = size_new
        score = score_of(eta, size)
        if float(np.max(np.abs(score))) <= tol and size_change <= 1e-9:
            converged = True
            break

    score_norm = float(np.max(np.abs(score_of(eta, size))))
    converged = converged and score_norm <= tol
    mu = mean_of(eta)
    w = mu * size / (size + mu)
    info = x.T @ (w[:, None] * x)
    return GlmFit(
        eta=eta,
        dispersion=size,
        loglik=_nb_loglik(y, mu, size),
        converged=converged,
        iterations=iterations,
        score_norm=score_norm,
        condition=float(np.linalg.cond(info)),
        names=tuple(names) if names is not None else None,
    )


def intensity(fit: GlmFit, row: DesignRow) -> float:
    """Fitted intensity exposure * exp(x . eta) for one row.

    A linear predictor above the overflow cap is an error; below the cap
    it is clamped (the result underflows gracefully but stays positive).
    """
    xb = float(np.dot(row.x, fit.eta))
    if xb > LINPRED_CAP:
        raise EstimationError(f"linear predictor {xb:.1f} exceeds the overflow cap {LINPRED_CAP}")
    return row.exposure * math.exp(max(xb, -LINPRED_CAP))
