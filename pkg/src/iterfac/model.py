"""Priors on factor components and spiked rank-one problem instances.

The observation model is ``A = u0 v0^T + sqrt(m) W`` with ``W_ij ~ N(0, tau_w)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

# Largest m*n accepted by generate_problem (float64 entries, about 16 GiB).
MAX_ENTRIES = 2**31


@dataclass(frozen=True)
class Gaussian:
    mean: float = 0.0
    variance: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.mean):
            raise ValueError(f"Gaussian mean must be finite, got {self.mean}")
        if not (self.variance > 0 and np.isfinite(self.variance)):
            raise ValueError(f"Gaussian variance must be positive, got {self.variance}")


@dataclass(frozen=True)
class BernoulliExponential:
    """Zero with probability ``1 - sparsity``, otherwise ``Exp(rate)``."""

    sparsity: float
    rate: float = 1.0

    def __post_init__(self):
        if not 0 < self.sparsity <= 1:
            raise ValueError(f"sparsity must lie in (0, 1], got {self.sparsity}")
        if not (self.rate > 0 and np.isfinite(self.rate)):
            raise ValueError(f"rate must be positive, got {self.rate}")


@dataclass(frozen=True)
class PointMass:
    value: float

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"PointMass value must be finite, got {self.value}")


Prior = Union[Gaussian, BernoulliExponential, PointMass]
Seed = Union[int, np.random.SeedSequence]


def prior_moments(prior: Prior) -> tuple[float, float]:
    """Return ``(E[X], E[X^2])`` for a prior."""
    if isinstance(prior, Gaussian):
        return prior.mean, prior.variance + prior.mean**2
    if isinstance(prior, BernoulliExponential):
        lam, r = prior.sparsity, prior.rate
        return lam / r, 2.0 * lam / r**2
    if isinstance(prior, PointMass):
        return prior.value, prior.value**2
    raise TypeError(f"unsupported prior {prior!r}")


def prior_variance(prior: Prior) -> float:
    mean, second = prior_moments(prior)
    return second - mean**2


def _as_seed_sequence(seed: Seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def _draw(prior: Prior, count: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(prior, Gaussian):
        return prior.mean + np.sqrt(prior.variance) * rng.standard_normal(count)
    if isinstance(prior, BernoulliExponential):
        active = rng.random(count) < prior.sparsity
        return np.where(active, rng.exponential(1.0 / prior.rate, count), 0.0)
    if isinstance(prior, PointMass):
        return np.full(count, float(prior.value))
    raise TypeError(f"unsupported prior {prior!r}")


def sample_prior(prior: Prior, count: int, rng_seed: Seed) -> np.ndarray:
    """Draw ``count`` i.i.d. samples; identical seeds give identical draws."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(_as_seed_sequence(rng_seed))
    return _draw(prior, count, rng)


def component_seeds(rng_seed: Seed) -> tuple[np.random.SeedSequence, ...]:
    """Split a master seed into independent streams for ``(u0, v0, W)``."""
    return tuple(_as_seed_sequence(rng_seed).spawn(3))


@dataclass
class RankOneProblem:
    u0: np.ndarray
    v0: np.ndarray
    A: np.ndarray
    tau_w: float
    prior_u: Optional[Prior] = None
    prior_v: Optional[Prior] = None
    seed: Optional[int] = None
    m: int = field(init=False)
    n: int = field(init=False)

    def __post_init__(self):
        self.u0 = np.asarray(self.u0, dtype=float)
        self.v0 = np.asarray(self.v0, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        if self.u0.ndim != 1 or self.v0.ndim != 1:
            raise ValueError("u0 and v0 must be 1-D")
        self.m, self.n = self.u0.size, self.v0.size
        if self.A.shape != (self.m, self.n):
            raise ValueError(f"A has shape {self.A.shape}, expected {(self.m, self.n)}")
        if not self.tau_w > 0:
            raise ValueError(f"tau_w must be positive, got {self.tau_w}")

    @property
    def beta(self) -> float:
        return self.n / self.m

    def transpose(self) -> "RankOneProblem":
        """The same instance seen from the other side (``A^T``, roles swapped).

        The noise normalisation changes from ``sqrt(m)`` to ``sqrt(n)``, so
        ``tau_w`` is rescaled by ``m / n`` to keep ``A`` itself unchanged.
        """
        return RankOneProblem(self.v0, self.u0, self.A.T, self.tau_w * self.m / self.n,
                              self.prior_v, self.prior_u, self.seed)


def generate_problem(m: int, n: int, prior_u: Prior, prior_v: Prior, tau_w: float,
                     rng_seed: Seed) -> RankOneProblem:
    """Draw ``u0 ~ prior_u^m``, ``v0 ~ prior_v^n`` and ``A = u0 v0^T + sqrt(m) W``."""
    if m < 1 or n < 1:
        raise ValueError(f"dimensions must be positive, got m={m}, n={n}")
    if m * n > MAX_ENTRIES:
        raise ValueError(f"m*n = {m * n} exceeds the supported maximum {MAX_ENTRIES}")
    if not tau_w > 0:
        raise ValueError(f"tau_w must be positive, got {tau_w}")
    s_u, s_v, s_w = component_seeds(rng_seed)
    u0 = _draw(prior_u, m, np.random.default_rng(s_u))
    v0 = _draw(prior_v, n, np.random.default_rng(s_v))
    W = np.sqrt(tau_w) * np.random.default_rng(s_w).standard_normal((m, n))
    A = np.outer(u0, v0) + np.sqrt(m) * W
    seed = rng_seed if isinstance(rng_seed, (int, np.integer)) else None
    return RankOneProblem(u0, v0, A, float(tau_w), prior_u, prior_v, seed)


def snr_to_tau_w(snr_db: float, tau_u: float, tau_v: float) -> float:
    """Noise variance giving scaled SNR ``10 log10(tau_u tau_v / tau_w)``."""
    if tau_u <= 0 or tau_v <= 0:
        raise ValueError("tau_u and tau_v must be positive")
    return tau_u * tau_v * 10.0 ** (-snr_db / 10.0)


def tau_w_to_snr(tau_w: float, tau_u: float, tau_v: float) -> float:
    if tau_w <= 0:
        raise ValueError("tau_w must be positive")
    return 10.0 * np.log10(tau_u * tau_v / tau_w)
