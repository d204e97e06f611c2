"""Scalar factor-selection rules ``G(t, p, lam)`` and their input derivatives.

Three families are provided:

* :class:`LinearRule` -- ``G = lam * p``.
* :class:`ProxRule` -- ``G = argmin_x [-p x + c(x) + lam/2 x^2]`` for a separable cost.
* :class:`MMSERule` -- posterior mean ``E[X0 | a X0 + N(0, s2) = p]`` under a prior.

MMSE rules carry a mutable channel ``(scale, noise_var)`` which the engine
refreshes before every half-iteration; ``lam`` is ignored by them.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import optimize, special

from .model import BernoulliExponential, Gaussian, PointMass, Prior, prior_moments

_SQRT2 = np.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)

COST_KINDS = ("zero", "l1", "nonnegative_l1", "squared_l2")


@dataclass(frozen=True)
class ScalarCost:
    """Per-component cost ``c(x)``.

    ``l1``: ``weight*|x|``; ``nonnegative_l1``: ``weight*x`` on ``x >= 0`` and
    ``+inf`` otherwise; ``squared_l2``: ``weight*x**2/2``.
    """

    kind: str = "zero"
    weight: float = 0.0

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ValueError(f"unknown cost kind {self.kind!r}; expected one of {COST_KINDS}")
        if not (self.weight >= 0 and np.isfinite(self.weight)):
            raise ValueError(f"cost weight must be nonnegative, got {self.weight}")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "l1":
            return self.weight * np.abs(x)
        if self.kind == "nonnegative_l1":
            return np.where(x >= 0, self.weight * x, np.inf)
        return 0.5 * self.weight * x**2

    def total(self, x) -> float:
        return float(np.sum(self(x)))

    def prox(self, p, lam):
        """Minimiser of ``-p x + c(x) + lam/2 x^2``."""
        _check_curvature(lam)
        p = np.asarray(p, dtype=float)
        if self.kind == "zero":
            return p / lam
        if self.kind == "l1":
            return np.sign(p) * np.maximum(np.abs(p) - self.weight, 0.0) / lam
        if self.kind == "nonnegative_l1":
            return np.maximum(p - self.weight, 0.0) / lam
        return p / (lam + self.weight)

    def prox_derivative(self, p, lam):
        _check_curvature(lam)
        p = np.asarray(p, dtype=float)
        if self.kind == "zero":
            return np.full_like(p, 1.0 / lam)
        # kinks belong to the dead zone
        if self.kind == "l1":
            return np.where(np.abs(p) > self.weight, 1.0 / lam, 0.0)
        if self.kind == "nonnegative_l1":
            return np.where(p > self.weight, 1.0 / lam, 0.0)
        return np.full_like(p, 1.0 / (lam + self.weight))


def _check_curvature(lam):
    if not np.all(np.asarray(lam) > 0):
        raise ValueError(f"nonconvex scalar subproblem: lambda must be positive, got {lam}")


# ---------------------------------------------------------------------------
# Scalar MMSE denoisers
# ---------------------------------------------------------------------------

def _check_channel(noise_var):
    if not noise_var > 0:
        raise ValueError(f"noise variance must be positive, got {noise_var}")


def gaussian_posterior(p, mean, variance, scale, noise_var):
    """Posterior mean and variance of ``X ~ N(mean, variance)`` given ``p = scale X + N(0, noise_var)``."""
    _check_channel(noise_var)
    p = np.asarray(p, dtype=float)
    denom = scale**2 * variance + noise_var
    gain = scale * variance / denom
    post_mean = mean + gain * (p - scale * mean)
    post_var = np.full_like(p, variance * noise_var / denom)
    return post_mean, post_var


def _log_exp_half_sq_ndtr(z):
    """``log(exp(z^2/2) * Phi(z))`` without overflow."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    neg = z < 0
    out[neg] = np.log(0.5 * special.erfcx(-z[neg] / _SQRT2))
    out[~neg] = 0.5 * z[~neg] ** 2 + special.log_ndtr(z[~neg])
    return out


def bernoulli_exp_posterior(p, sparsity, rate, scale, noise_var):
    """Posterior mean and variance of a Bernoulli-Exponential variable.

    ``X ~ (1 - sparsity) delta_0 + sparsity Exp(rate)`` observed through
    ``p = scale X + N(0, noise_var)``. The active component's posterior is a
    normal truncated to ``[0, inf)``; its moments use the inverse Mills ratio
    evaluated through ``erfcx`` so that large ``|p|`` stays finite.
    """
    _check_channel(noise_var)
    shape = np.shape(p)
    p = np.atleast_1d(np.asarray(p, dtype=float))
    prior_mean = sparsity / rate
    if sparsity == 0:
        return np.zeros(shape), np.zeros(shape)
    if scale == 0:
        var = 2 * sparsity / rate**2 - prior_mean**2
        return np.full(shape, prior_mean), np.full(shape, var)
    if scale < 0:
        scale, p = -scale, -p
    s = np.sqrt(noise_var) / scale
    mu = p / scale - rate * s**2
    z = mu / s
    # log of (active weight / inactive weight)
    if sparsity < 1:
        log_odds = (np.log(sparsity) - np.log1p(-sparsity) + np.log(rate * s)
                    + _LOG_SQRT_2PI + _log_exp_half_sq_ndtr(z))
        active = special.expit(log_odds)
    else:
        active = np.ones_like(p)
    mills = np.sqrt(2 / np.pi) / special.erfcx(-z / _SQRT2)
    m1 = mu + s * mills
    v1 = np.maximum(s**2 * (1.0 - z * mills - mills**2), 0.0)
    mean = active * m1
    var = active * v1 + active * (1 - active) * m1**2
    return mean.reshape(shape), var.reshape(shape)


def bernoulli_exp_log_marginal(p, sparsity, rate, scale, noise_var):
    """Log density of ``p = scale X + N(0, noise_var)`` with ``X`` Bernoulli-Exponential, ``scale > 0``."""
    _check_channel(noise_var)
    if not scale > 0:
        raise ValueError("scale must be positive")
    p = np.asarray(p, dtype=float)
    sd = np.sqrt(noise_var)
    s = sd / scale
    z = p / sd - rate * s
    log_inactive = (np.log1p(-sparsity) if sparsity < 1 else -np.inf) \
        - 0.5 * (p / sd) ** 2 - np.log(sd) - _LOG_SQRT_2PI
    # exp(z^2/2 - p^2/(2 noise_var)) Phi(z), split by the sign of z
    tail = np.where(
        z < 0,
        -0.5 * (p / sd) ** 2 + np.log(0.5 * special.erfcx(-np.minimum(z, 0) / _SQRT2)),
        -rate * p / scale + 0.5 * (rate * s) ** 2 + special.log_ndtr(np.maximum(z, 0)),
    )
    log_active = np.log(sparsity * rate * s / sd) + tail
    return np.logaddexp(log_inactive, log_active)


def mmse_denoiser_bernoulli_exp(sparsity, rate, scale, noise_var, p):
    """Posterior mean and its derivative in ``p`` for the Bernoulli-Exponential prior.

    The derivative follows from ``d/dp E[X|p] = scale * Var[X|p] / noise_var``.
    """
    mean, var = bernoulli_exp_posterior(p, sparsity, rate, scale, noise_var)
    return mean, scale * var / noise_var


def posterior_moments(prior: Prior, p, scale, noise_var):
    """Posterior ``(mean, variance)`` of ``X0`` given ``p = scale X0 + N(0, noise_var)``.

    ``scale == 0`` is an uninformative channel and returns the prior moments
    for any ``noise_var >= 0``.
    """
    if scale == 0:
        p = np.asarray(p, dtype=float)
        mean, second = prior_moments(prior)
        return np.full_like(p, mean), np.full_like(p, second - mean**2)
    if isinstance(prior, Gaussian):
        return gaussian_posterior(p, prior.mean, prior.variance, scale, noise_var)
    if isinstance(prior, BernoulliExponential):
        return bernoulli_exp_posterior(p, prior.sparsity, prior.rate, scale, noise_var)
    if isinstance(prior, PointMass):
        _check_channel(noise_var)
        p = np.asarray(p, dtype=float)
        return np.full_like(p, prior.value), np.zeros_like(p)
    raise TypeError(f"unsupported prior {prior!r}")


# ---------------------------------------------------------------------------
# Selection rules
# ---------------------------------------------------------------------------

class SelectionRule:
    """Base class. Subclasses implement ``value`` and ``derivative`` elementwise."""

    needs_channel = False
    side = "u"

    def value(self, p, lam, t=0):
        raise NotImplementedError

    def derivative(self, p, lam, t=0):
        raise NotImplementedError

    def lipschitz(self, lam) -> float:
        raise NotImplementedError

    def set_channel(self, scale: float, noise_var: float) -> None:
        """Refresh channel parameters; a no-op except for MMSE rules."""

    def breakpoints(self, lam) -> tuple:
        """Inputs ``p`` where ``value`` has a kink (used to split quadrature)."""
        return ()

    def copy(self):
        return copy.copy(self)


class LinearRule(SelectionRule):
    def __init__(self, side="u"):
        self.side = side

    def value(self, p, lam, t=0):
        return lam * np.asarray(p, dtype=float)

    def derivative(self, p, lam, t=0):
        return np.full_like(np.asarray(p, dtype=float), lam)

    def lipschitz(self, lam):
        return abs(lam)

    def __repr__(self):
        return f"LinearRule(side={self.side!r})"


class ProxRule(SelectionRule):
    def __init__(self, cost: Optional[ScalarCost] = None, side="u"):
        self.cost = cost if cost is not None else ScalarCost()
        self.side = side

    def value(self, p, lam, t=0):
        return self.cost.prox(p, lam)

    def derivative(self, p, lam, t=0):
        return self.cost.prox_derivative(p, lam)

    def lipschitz(self, lam):
        _check_curvature(lam)
        return 1.0 / lam

    def breakpoints(self, lam):
        w = self.cost.weight
        if self.cost.kind == "l1" and w > 0:
            return (-w, w)
        if self.cost.kind == "nonnegative_l1":
            return (w,)
        return ()

    def __repr__(self):
        return f"ProxRule(cost={self.cost!r}, side={self.side!r})"


class MMSERule(SelectionRule):
    needs_channel = True

    def __init__(self, prior: Prior, side="u", scale=1.0, noise_var=1.0):
        self.prior = prior
        self.side = side
        self.scale = float(scale)
        self.noise_var = float(noise_var)

    def set_channel(self, scale, noise_var):
        if scale != 0:
            _check_channel(noise_var)
        self.scale = float(scale)
        self.noise_var = float(noise_var)

    def value(self, p, lam=None, t=0):
        return posterior_moments(self.prior, p, self.scale, self.noise_var)[0]

    def derivative(self, p, lam=None, t=0):
        if self.scale == 0:
            return np.zeros_like(np.asarray(p, dtype=float))
        var = posterior_moments(self.prior, p, self.scale, self.noise_var)[1]
        return self.scale * var / self.noise_var

    def lipschitz(self, lam=None, grid_size=4001):
        """Largest ``|dG/dp|``: dense grid over ``p``, then refined around the grid maximum."""
        if isinstance(self.prior, Gaussian):
            v = self.prior.variance
            return abs(self.scale) * v / (self.scale**2 * v + self.noise_var)
        if isinstance(self.prior, PointMass):
            return 0.0
        mean, second = prior_moments(self.prior)
        sd = np.sqrt(self.noise_var)
        span = abs(self.scale) * (mean + 40 * np.sqrt(second)) + 40 * sd
        p = np.linspace(-span, span, grid_size)
        slope = np.abs(self.derivative(p))
        k = int(np.argmax(slope))
        lo, hi = p[max(k - 1, 0)], p[min(k + 1, grid_size - 1)]
        res = optimize.minimize_scalar(lambda x: -abs(float(self.derivative(x))),
                                       bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-12 * (1 + span)})
        return float(max(slope[k], -res.fun))

    def __repr__(self):
        return (f"MMSERule(prior={self.prior!r}, side={self.side!r}, "
                f"scale={self.scale:g}, noise_var={self.noise_var:g})")


def select(rule: SelectionRule, t, p, lam):
    return rule.value(p, lam, t)


def select_derivative(rule: SelectionRule, t, p, lam):
    return rule.derivative(p, lam, t)


def make_rule(family: str, side: str, prior: Optional[Prior] = None,
              cost: Optional[ScalarCost] = None) -> SelectionRule:
    if family == "linear":
        return LinearRule(side)
    if family == "mmse":
        if prior is None:
            raise ValueError("MMSE rule needs a prior")
        return MMSERule(prior, side)
    if family == "prox":
        return ProxRule(cost, side)
    raise ValueError(f"unknown rule family {family!r}")


# ---------------------------------------------------------------------------
# Lambda adaptation
# ---------------------------------------------------------------------------

LambdaFn = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


def lambda_update(mode: str, *, mu=None, scaled_norm_sq=None, phi: Optional[LambdaFn] = None,
                  truth=None, estimate=None, t: int = 0) -> float:
    """Selection parameter for the next half-iteration.

    ``mode="descent"`` returns ``mu + scaled_norm_sq`` where ``scaled_norm_sq``
    is ``||v(t)||^2/m`` (for ``lam_u``) or ``||u(t+1)||^2/m`` (for ``lam_v``).
    ``mode="analysis"`` returns the empirical average ``mean(phi(t, truth, estimate))``.
    """
    if mode == "descent":
        if mu is None or scaled_norm_sq is None:
            raise ValueError("descent lambda needs mu and scaled_norm_sq")
        return float(mu + scaled_norm_sq)
    if mode == "analysis":
        if phi is None or truth is None or estimate is None:
            raise ValueError("analysis lambda needs phi, truth and estimate")
        return float(np.mean(phi(t, np.asarray(truth), np.asarray(estimate))))
    raise ValueError(f"unknown lambda mode {mode!r}")


def constant_lambda(value: float = 1.0) -> LambdaFn:
    """Adaptation function that ignores its inputs."""

    def phi(t, truth, estimate):
        return np.full(np.shape(estimate), float(value))

    return phi
