"""Probability primitives for the Poisson-gamma filtering engine.

Everything is computed in log space (via the log-gamma function), never
through factorials: the negative-binomial size parameter grows without
bound under some variance regimes.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

__all__ = [
    "DomainError",
    "OracleError",
    "GammaLaw",
    "BetaLaw",
    "NBLaw",
    "log_gamma_fn",
    "nb_log_pmf",
    "nb_pmf_oracle",
    "sample_gamma",
    "sample_beta",
    "sample_poisson",
    "rng_stream",
]


class DomainError(ValueError):
    """An argument is outside the admissible domain of an operation."""


class OracleError(RuntimeError):
    """The quadrature oracle could not reach the requested accuracy."""


def log_gamma_fn(x):
    """Natural log of the gamma function for x > 0 (scalar or array)."""
    arr = np.asarray(x, dtype=float)
    if not np.all(arr > 0.0):
        raise DomainError(f"log_gamma_fn needs x > 0, got {x!r}")
    out = special.gammaln(arr)
    return float(out) if np.ndim(x) == 0 else out


@dataclass(frozen=True)
class GammaLaw:
    """Gamma distribution in shape/rate form.

    The degenerate "constant zero" law is carried by an explicit flag so
    that shape > 0 stays assertable for every live law.
    """

    shape: float
    rate: float
    is_zero: bool = False

    def __post_init__(self):
        if self.is_zero:
            return
        if not (self.shape > 0.0 and self.rate > 0.0):
            raise DomainError(
                f"gamma law needs shape > 0 and rate > 0, got ({self.shape}, {self.rate})"
            )

    @classmethod
    def zero(cls) -> "GammaLaw":
        """The degenerate law that is identically 0."""
        return cls(0.0, 1.0, is_zero=True)

    def mean(self) -> float:
        return 0.0 if self.is_zero else self.shape / self.rate

    def variance(self) -> float:
        return 0.0 if self.is_zero else self.shape / self.rate**2


@dataclass(frozen=True)
class BetaLaw:
    """Beta distribution on (0, 1); b = 0 denotes the constant 1, a = 0 the constant 0."""

    a: float
    b: float

    def __post_init__(self):
        if self.a < 0.0 or self.b < 0.0 or not self.a + self.b > 0.0:
            raise DomainError(f"beta law needs a, b >= 0 and a + b > 0, got ({self.a}, {self.b})")

    @property
    def is_one(self) -> bool:
        return self.b == 0.0

    @property
    def is_zero(self) -> bool:
        return self.a == 0.0

    def mean(self) -> float:
        return self.a / (self.a + self.b)


@dataclass(frozen=True)
class NBLaw:
    """Negative binomial in mean/size form: variance = mean + mean**2 / size."""

    mean: float
    size: float

    def __post_init__(self):
        if not (self.mean > 0.0 and self.size > 0.0):
            raise DomainError(f"NB law needs mean > 0 and size > 0, got ({self.mean}, {self.size})")

    def variance(self) -> float:
        return self.mean + self.mean**2 / self.size


def nb_logpmf_raw(y, mean, size):
    """NB log-pmf in mean/size form; scalars or elementwise arrays.

    All callers (scalar filter and the vectorized panel kernel) share this
    expression so their results agree bit for bit.
    """
    return (
        special.gammaln(y + size)
        - special.gammaln(y + 1.0)
        - special.gammaln(size)
        - size * np.log1p(mean / size)
        + y * (np.log(mean) - np.log(size + mean))
    )


def nb_log_pmf(y, law: NBLaw) -> float:
    """Log probability of observing count y under the given NB law."""
    if y < 0 or y != int(y):
        raise DomainError(f"count must be a nonnegative integer, got {y!r}")
    return float(nb_logpmf_raw(float(y), law.mean, law.size))


def nb_pmf_oracle(y: int, shape: float, rate: float, intensity: float) -> float:
    """P(Y = y) for Y ~ Pois(intensity * Theta), Theta ~ Gamma(shape, rate), by quadrature.

    Independent check of the closed-form NB pmf: integrates the Poisson
    mass against the gamma density with adaptive quadrature, split at the
    posterior mean so both panels see a well-behaved integrand.
    """
    if y < 0 or y != int(y):
        raise DomainError(f"count must be a nonnegative integer, got {y!r}")
    if not (shape > 0.0 and rate > 0.0 and intensity > 0.0):
        raise DomainError("shape, rate and intensity must all be positive")

    log_const = (
        y * np.log(intensity)
        + shape * np.log(rate)
        - special.gammaln(y + 1.0)
        - special.gammaln(shape)
    )

    def integrand(theta: float) -> float:
        if theta <= 0.0:
            return 0.0
        return np.exp(
            log_const + (y + shape - 1.0) * np.log(theta) - (intensity + rate) * theta
        )

    split = (y + shape) / (intensity + rate)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        lo, err_lo = integrate.quad(integrand, 0.0, split, epsabs=1e-13, epsrel=1e-12, limit=200)
        hi, err_hi = integrate.quad(integrand, split, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)
    if err_lo + err_hi > 1e-9:
        raise OracleError(
            f"quadrature error estimate {err_lo + err_hi:.3e} too large for "
            f"(y={y}, shape={shape}, rate={rate}, intensity={intensity})"
        )
    return lo + hi


def sample_gamma(law: GammaLaw, rng: np.random.Generator) -> float:
    """Draw from a gamma law; the degenerate zero law consumes no randomness."""
    if law.is_zero:
        return 0.0
    return float(rng.gamma(law.shape, 1.0 / law.rate))


def sample_beta(law: BetaLaw, rng: np.random.Generator) -> float:
    """Draw from a beta law; the endpoint conventions consume no randomness."""
    if law.is_one:
        return 1.0
    if law.is_zero:
        return 0.0
    return float(rng.beta(law.a, law.b))


def sample_poisson(mean: float, rng: np.random.Generator) -> int:
    """Poisson draw with the convention that mean 0 gives the constant 0."""
    if mean < 0.0:
        raise DomainError(f"Poisson mean must be >= 0, got {mean}")
    if mean == 0.0:
        return 0
    return int(rng.poisson(mean))


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent counter-based generator addressed by (seed, key...).

    Distinct keys under the same seed give statistically independent
    streams, so per-series simulations can run in any order or in
    parallel and still reproduce bit for bit.
    """
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=key))
    )
