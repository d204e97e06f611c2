"""State evolution (SE) for IterFac.

The scalar-equivalent model: at iteration ``t``::

    U(t+1) = G_u(t, P(t), lam_u(t)),  P(t) = beta a_v1(t) U0 + N(0, beta tau_w a_v0(t))
    V(t+1) = G_v(t, Q(t), lam_v(t)),  Q(t) = a_u1(t+1) V0 + N(0, tau_w a_u0(t+1))

with ``a_x0 = E[X^2]`` and ``a_x1 = E[X0 X]``. Correlations are
``rho_u = a_u1^2 / (a_u0 tau_u)``, likewise for ``v``.

Besides the generic recursion (:func:`se_step`) this module has the closed
forms for linear and MMSE selection and the zero-initialisation threshold.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy import integrate

from .model import (BernoulliExponential, Gaussian, PointMass, Prior, _draw, prior_moments,
                    prior_variance)
from .selection import (LambdaFn, SelectionRule, bernoulli_exp_log_marginal,
                        bernoulli_exp_posterior)


class QuadratureError(ArithmeticError):
    """An integral did not reach the requested accuracy or was not finite."""


Integrand = Callable[[np.ndarray, np.ndarray], np.ndarray]

# Half-width, in standard deviations, of the split Gauss-Legendre panels.
_SPAN = 12.0


@dataclass(frozen=True)
class ExpectationEngine:
    """Evaluates ``E[f(X0, Y)]`` with ``Y = offset + scale X0 + sqrt(noise_var) Z``.

    ``gauss_hermite`` is deterministic quadrature. For a Gaussian (or fixed)
    ``X0`` the pair is Gaussian: the outer integral runs over ``Y`` and the
    inner one over ``X0 | Y``, each with ``nodes`` Hermite points. Integrands
    with kinks (prox rules) announce them through ``breakpoints`` in ``y``;
    the ``Y`` integral is then split there and done with Gauss-Legendre
    panels on ``+-12`` standard deviations. The Bernoulli-Exponential prior
    is its zero atom plus adaptive quadrature (relative ``tolerance``) over the
    exponential part. ``monte_carlo`` draws ``samples`` pairs from ``seed``
    and reports standard errors.
    """

    method: str = "gauss_hermite"
    nodes: int = 63
    samples: int = 200_000
    seed: int = 0
    tolerance: float = 1e-9
    panel_nodes: int = 48

    def __post_init__(self):
        if self.method == "gauss_hermite":
            if self.nodes < 31 or self.nodes % 2 == 0:
                raise ValueError(f"nodes must be odd and >= 31, got {self.nodes}")
        elif self.method == "monte_carlo":
            if self.samples < 100_000:
                raise ValueError(f"samples must be >= 1e5, got {self.samples}")
        else:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")

    def expect(self, prior: Prior, funcs: Sequence[Integrand], scale=1.0, noise_var=0.0,
               offset=0.0, breakpoints=()) -> np.ndarray:
        return self.expect_with_error(prior, funcs, scale, noise_var, offset, breakpoints)[0]

    def expect_with_error(self, prior, funcs, scale=1.0, noise_var=0.0, offset=0.0,
                          breakpoints=()):
        if not noise_var >= 0:
            raise ValueError("noise_var must be nonnegative")
        if self.method == "monte_carlo":
            return self._monte_carlo(prior, funcs, scale, noise_var, offset)
        values = self._quadrature(prior, funcs, scale, noise_var, offset, tuple(breakpoints))
        return values, np.zeros_like(values)

    def _y_nodes(self, mean, sd, breakpoints):
        """Standard-normal nodes/weights for ``Y = mean + sd * z``, split at kinks."""
        if sd == 0:
            return np.zeros(1), np.ones(1)
        cuts = sorted({float(np.clip((b - mean) / sd, -_SPAN, _SPAN)) for b in breakpoints})
        if not cuts:
            z, w = hermegauss(self.nodes)
            return z, w / np.sqrt(2 * np.pi)
        edges = np.array([-_SPAN] + cuts + [_SPAN])
        t, wt = leggauss(self.panel_nodes)
        half = np.diff(edges)[:, None] / 2
        z = (edges[:-1, None] + half * (t[None, :] + 1)).ravel()
        w = (half * wt[None, :]).ravel() * np.exp(-z**2 / 2) / np.sqrt(2 * np.pi)
        return z, w

    def _gaussian_pair(self, funcs, mean_x, var_x, scale, noise_var, offset, breakpoints):
        """``E f(X, Y)`` for ``X ~ N(mean_x, var_x)`` (``var_x`` may be 0)."""
        mean_y = offset + scale * mean_x
        var_y = scale**2 * var_x + noise_var
        zy, wy = self._y_nodes(mean_y, np.sqrt(var_y), breakpoints)
        y = mean_y + np.sqrt(var_y) * zy
        if var_x == 0:
            x = np.full_like(y, mean_x)[:, None]
            wx = np.ones(1)
        else:
            gain = scale * var_x / var_y if var_y > 0 else 0.0
            cond_sd = np.sqrt(max(var_x - gain * scale * var_x, 0.0))
            zx, wx = hermegauss(self.nodes)
            wx = wx / np.sqrt(2 * np.pi)
            x = (mean_x + gain * (y - mean_y))[:, None] + cond_sd * zx[None, :]
        yb = np.broadcast_to(y[:, None], x.shape)
        return np.array([wy @ (np.asarray(f(x, yb), dtype=float) @ wx) for f in funcs])

    def _quadrature(self, prior, funcs, scale, noise_var, offset, breakpoints):
        if isinstance(prior, PointMass):
            return self._gaussian_pair(funcs, prior.value, 0.0, scale, noise_var, offset,
                                       breakpoints)
        if isinstance(prior, Gaussian):
            return self._gaussian_pair(funcs, prior.mean, prior.variance, scale, noise_var,
                                       offset, breakpoints)
        if isinstance(prior, BernoulliExponential):
            lam, rate = prior.sparsity, prior.rate
            atom = self._gaussian_pair(funcs, 0.0, 0.0, scale, noise_var, offset, breakpoints)

            def slab(x):
                return rate * np.exp(-rate * x) * self._gaussian_pair(
                    funcs, x, 0.0, scale, noise_var, offset, breakpoints)

            # kinks of x -> f(x, scale x) when the noise vanishes
            points = None
            if noise_var == 0 and scale != 0 and breakpoints:
                points = sorted(x for x in ((b - offset) / scale for b in breakpoints) if x > 0)
            # relative accuracy: second moments scale with lambda^2, which
            # linear rules let grow or shrink geometrically; the tiny absolute
            # floor lets integrals that vanish identically terminate
            value, err, info = integrate.quad_vec(slab, 0.0, np.inf, epsabs=1e-300,
                                                  epsrel=self.tolerance, norm="max",
                                                  limit=2000, full_output=True,
                                                  points=points or None)
            if not info.success or not np.all(np.isfinite(value)):
                raise QuadratureError(
                    f"slab integral did not converge: estimate {value}, error bound {err}")
            return (1 - lam) * atom + lam * value
        raise TypeError(f"unsupported prior {prior!r}")

    def _monte_carlo(self, prior, funcs, scale, noise_var, offset):
        rng = np.random.default_rng(self.seed)
        x0 = _draw(prior, self.samples, rng)
        y = offset + scale * x0 + np.sqrt(noise_var) * rng.standard_normal(self.samples)
        vals = np.array([np.asarray(f(x0, y), dtype=float) for f in funcs])
        return vals.mean(axis=1), vals.std(axis=1, ddof=1) / np.sqrt(self.samples)


DEFAULT_ENGINE = ExpectationEngine()


@dataclass(frozen=True)
class SEState:
    """SE quantities at iteration ``t``.

    ``lambda_u`` and ``lambda_v`` are the parameters used *in* iteration ``t``
    (producing ``U(t+1)`` and ``V(t+1)``).
    """

    t: int
    alpha_u0: float
    alpha_u1: float
    alpha_v0: float
    alpha_v1: float
    lambda_u: float
    lambda_v: float
    rho_u: float
    rho_v: float


def _rho(a1, a0, tau):
    if a0 <= 0:
        return 0.0
    return float(a1**2 / (a0 * tau))


def _check_finite(values, what):
    if not np.all(np.isfinite(values)):
        raise QuadratureError(f"non-finite expectation for {what}: {values}")


def _lambda_expectation(fn: Optional[LambdaFn], t: int):
    if fn is None:
        return None
    return lambda x0, x: fn(t, x0, x)


def _half_step(rule: SelectionRule, prior: Prior, scale, noise_var, lam, t, engine,
               lambda_fn: Optional[LambdaFn], side: str):
    """Second moments of ``G(scale X0 + noise)`` and the adaptation average on its output."""
    rule = rule.copy()
    if rule.needs_channel:
        rule.set_channel(scale, noise_var)

    def g(y):
        return rule.value(y, lam, t)

    funcs = [lambda x0, y: g(y) ** 2, lambda x0, y: x0 * g(y)]
    if lambda_fn is not None:
        funcs.append(lambda x0, y: lambda_fn(t, x0, g(y)))
    vals = engine.expect(prior, funcs, scale=scale, noise_var=noise_var,
                         breakpoints=rule.breakpoints(lam))
    _check_finite(vals, f"E[{side}^2], E[{side}0 {side}]")
    lam_next = float(vals[2]) if lambda_fn is not None else 1.0
    return float(vals[0]), float(vals[1]), lam_next


def initial_state(prior_u: Prior, prior_v: Prior, init: str = "prior_mean", eps: float = 0.0,
                  engine: ExpectationEngine = DEFAULT_ENGINE,
                  lambda_u_fn: Optional[LambdaFn] = None,
                  second_moment: Optional[float] = None) -> SEState:
    """SE state at ``t = 0`` with ``U(0) = 0``.

    ``init="prior_mean"`` takes ``V(0) = E[V0]``. ``init="correlated"`` takes
    ``V(0) = c V0 + N(0, (1 - eps) s)`` with ``s = second_moment`` (default
    ``tau_v``) and ``c = sqrt(eps s / tau_v)``, so that ``rho_v(0) = eps`` and
    ``E[V(0)^2] = s`` for a zero-mean ``V0``. The ``lambda_v`` field is a
    placeholder until the first step fills it in.
    """
    mean_v, tau_v = prior_moments(prior_v)
    if init == "prior_mean":
        a_v0 = a_v1 = mean_v**2
        kw = dict(scale=0.0, noise_var=0.0, offset=mean_v)
    elif init == "correlated":
        if not 0 <= eps <= 1:
            raise ValueError("eps must lie in [0, 1]")
        s = tau_v if second_moment is None else float(second_moment)
        c = np.sqrt(eps * s / tau_v)
        a_v0, a_v1 = c**2 * tau_v + (1 - eps) * s, c * tau_v
        kw = dict(scale=c, noise_var=(1 - eps) * s)
    else:
        raise ValueError(f"unknown init {init!r}")
    lam_u = 1.0
    if lambda_u_fn is not None:
        lam_u = float(engine.expect(prior_v, [lambda x0, y: lambda_u_fn(0, x0, y)], **kw)[0])
    return SEState(0, 0.0, 0.0, float(a_v0), float(a_v1), lam_u, 1.0,
                   0.0, _rho(a_v1, a_v0, tau_v))


def se_step(state: SEState, rule_u: SelectionRule, rule_v: SelectionRule, prior_u: Prior,
            prior_v: Prior, beta: float, tau_w: float,
            engine: ExpectationEngine = DEFAULT_ENGINE,
            lambda_u_fn: Optional[LambdaFn] = None,
            lambda_v_fn: Optional[LambdaFn] = None) -> tuple[SEState, SEState]:
    """Advance one iteration.

    Returns ``(state_t, state_t1)``: the input with ``lambda_v`` set to the
    value actually used in iteration ``t``, and the state at ``t + 1``.
    """
    t = state.t
    tau_u = prior_moments(prior_u)[1]
    tau_v = prior_moments(prior_v)[1]
    a_u0, a_u1, lam_v = _half_step(
        rule_u, prior_u, beta * state.alpha_v1, beta * tau_w * state.alpha_v0,
        state.lambda_u, t, engine, lambda_v_fn, "U")
    a_v0, a_v1, lam_u_next = _half_step(
        rule_v, prior_v, a_u1, tau_w * a_u0, lam_v, t, engine,
        None if lambda_u_fn is None else (lambda s, x0, x: lambda_u_fn(s + 1, x0, x)), "V")
    done = replace(state, lambda_v=lam_v)
    nxt = SEState(t + 1, a_u0, a_u1, a_v0, a_v1, lam_u_next, 1.0,
                  _rho(a_u1, a_u0, tau_u), _rho(a_v1, a_v0, tau_v))
    return done, nxt


def se_trajectory(rule_u, rule_v, prior_u, prior_v, beta, tau_w, iters, init="prior_mean",
                  eps=0.0, engine: ExpectationEngine = DEFAULT_ENGINE, lambda_u_fn=None,
                  lambda_v_fn=None, second_moment=None) -> list[SEState]:
    """States ``t = 0..iters``; the final state's ``lambda_v`` comes from one extra u-half-step."""
    state = initial_state(prior_u, prior_v, init, eps, engine, lambda_u_fn, second_moment)
    states = []
    for _ in range(iters):
        done, state = se_step(state, rule_u, rule_v, prior_u, prior_v, beta, tau_w, engine,
                              lambda_u_fn, lambda_v_fn)
        states.append(done)
    _, _, lam_v = _half_step(rule_u, prior_u, beta * state.alpha_v1,
                             beta * tau_w * state.alpha_v0, state.lambda_u, state.t, engine,
                             lambda_v_fn, "U")
    states.append(replace(state, lambda_v=lam_v))
    return states


# ---------------------------------------------------------------------------
# Linear selection
# ---------------------------------------------------------------------------

def se_linear_recursion(rho_v, beta, tau_u, tau_v, tau_w):
    """One linear-rule SE step ``rho_v(t) -> (rho_u(t+1), rho_v(t+1))``."""
    x = tau_u * tau_v
    num = beta * x * rho_v
    rho_u = min(num / (num + tau_w), 1.0) if num > 0 else 0.0
    rho_v_next = x * rho_u / (x * rho_u + tau_w) if rho_u > 0 else 0.0
    return rho_u, rho_v_next


def se_linear_fixed_point(beta, tau_u, tau_v, tau_w):
    x = tau_u * tau_v
    gap = max(beta * x**2 - tau_w**2, 0.0)
    return gap / (x * (beta * x + tau_w)), gap / (beta * x * (x + tau_w))


def se_linear_trajectory(rho_v0, beta, tau_u, tau_v, tau_w, iters):
    """Arrays ``rho_u[0..iters]`` (``rho_u[0] = 0``) and ``rho_v[0..iters]``."""
    rho_u, rho_v = [0.0], [float(rho_v0)]
    for _ in range(iters):
        ru, rv = se_linear_recursion(rho_v[-1], beta, tau_u, tau_v, tau_w)
        rho_u.append(ru)
        rho_v.append(rv)
    return np.array(rho_u), np.array(rho_v)


# ---------------------------------------------------------------------------
# MMSE selection
# ---------------------------------------------------------------------------

def mmse_function(prior: Prior, eta: float, engine: Optional[ExpectationEngine] = None,
                  epsabs: float = 1e-13) -> float:
    """``Var(X0 | sqrt(eta) X0 + D)`` averaged over ``Y``, ``D ~ N(0, 1)``.

    Gaussian and point-mass priors are closed form. The Bernoulli-Exponential
    prior integrates the posterior variance against the marginal density of
    ``Y`` by adaptive quadrature; ``engine`` is accepted for API symmetry.
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if isinstance(prior, Gaussian):
        return prior.variance / (1 + eta * prior.variance)
    if isinstance(prior, PointMass):
        return 0.0
    if not isinstance(prior, BernoulliExponential):
        raise TypeError(f"unsupported prior {prior!r}")
    if eta == 0:
        return prior_variance(prior)
    a = np.sqrt(eta)
    lam, rate = prior.sparsity, prior.rate

    def integrand(y):
        var = bernoulli_exp_posterior(y, lam, rate, a, 1.0)[1]
        return float(var * np.exp(bernoulli_exp_log_marginal(y, lam, rate, a, 1.0)))

    total, bound = 0.0, 0.0
    # the slab tail decays like exp(-rate y / a)
    right = 40.0 + 60.0 * a / rate
    pieces = [(-np.inf, -8.0), (-8.0, 0.0), (0.0, 8.0), (8.0, max(right, 9.0)),
              (max(right, 9.0), np.inf)]
    for lo, hi in pieces:
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, err = integrate.quad(integrand, lo, hi, epsabs=epsabs / 5, epsrel=1e-12,
                                          limit=500)
            except integrate.IntegrationWarning as exc:
                val, err = integrate.quad(integrand, lo, hi, epsabs=epsabs / 5, limit=500)
                if err > 100 * epsabs:
                    raise QuadratureError(
                        f"MMSE quadrature failed on [{lo}, {hi}]: estimate {val}, "
                        f"error bound {err}") from exc
        total += val
        bound += err
    if not np.isfinite(total):
        raise QuadratureError(f"MMSE quadrature not finite: {total} (bound {bound})")
    return total


def mmse_initial_rho_v(prior_v: Prior) -> float:
    """``(E V0)^2 / tau_v``: the correlation of the constant start ``V(0) = E[V0]``."""
    mean, second = prior_moments(prior_v)
    return mean**2 / second


def se_mmse_recursion(rho_v, beta, tau_u, tau_v, tau_w, prior_u: Prior, prior_v: Prior,
                      engine: Optional[ExpectationEngine] = None):
    """One MMSE-rule SE step ``rho_v(t) -> (rho_u(t+1), rho_v(t+1))``."""
    rho_u = 1.0 - mmse_function(prior_u, beta * tau_v * rho_v / tau_w, engine) / tau_u
    rho_v_next = 1.0 - mmse_function(prior_v, tau_u * rho_u / tau_w, engine) / tau_v
    return rho_u, rho_v_next


def se_mmse_trajectory(rho_v0, beta, tau_u, tau_v, tau_w, prior_u, prior_v, iters,
                       engine=None):
    rho_u, rho_v = [0.0], [float(rho_v0)]
    for _ in range(iters):
        ru, rv = se_mmse_recursion(rho_v[-1], beta, tau_u, tau_v, tau_w, prior_u, prior_v,
                                   engine)
        rho_u.append(ru)
        rho_v.append(rv)
    return np.array(rho_u), np.array(rho_v)


def phase_transition_threshold(beta, tau_u, tau_v) -> float:
    """Noise level ``sqrt(beta) tau_u tau_v`` separating escape from zero initialisation."""
    if beta <= 0 or tau_u <= 0 or tau_v <= 0:
        raise ValueError("beta, tau_u and tau_v must be positive")
    return float(np.sqrt(beta) * tau_u * tau_v)


def epsilon_sweep(beta, tau_w, prior_u: Prior, prior_v: Prior,
                  eps_grid=(1e-4, 1e-6, 1e-8), max_iter=10_000, tol=1e-15):
    """Limit of the MMSE SE started from ``rho_v(0) = eps`` for each ``eps``.

    Iterates until successive ``rho_v`` differ by less than ``tol`` or
    ``max_iter`` is reached; returns ``{eps: (rho_v_final, iterations)}``.
    """
    tau_u = prior_moments(prior_u)[1]
    tau_v = prior_moments(prior_v)[1]
    out = {}
    for eps in eps_grid:
        rho_v, k = float(eps), 0
        for k in range(1, max_iter + 1):
            _, nxt = se_mmse_recursion(rho_v, beta, tau_u, tau_v, tau_w, prior_u, prior_v)
            converged = abs(nxt - rho_v) < tol
            rho_v = nxt
            if converged:
                break
        out[eps] = (rho_v, k)
    return out


# ---------------------------------------------------------------------------
# Scalar-equivalent metrics
# ---------------------------------------------------------------------------

METRICS = ("MSE_u", "MSE_v", "Corr_u", "Corr_v")


def scalar_equivalent_metric(metric: str, state: SEState, rule_u: SelectionRule,
                             rule_v: SelectionRule, prior_u: Prior, prior_v: Prior,
                             beta: float, tau_w: float,
                             engine: ExpectationEngine = DEFAULT_ENGINE,
                             lambda_v: Optional[float] = None) -> float:
    """Metric of the estimates at ``t + 1`` produced from ``state`` (at ``t``).

    MSEs are integrated directly over the scalar channel; correlations come
    from the second moments. ``lambda_v`` defaults to ``state.lambda_v``.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    t = state.t
    ru = rule_u.copy()
    scale_u, nv_u = beta * state.alpha_v1, beta * tau_w * state.alpha_v0
    if ru.needs_channel:
        ru.set_channel(scale_u, nv_u)

    def gu(y):
        return ru.value(y, state.lambda_u, t)

    vals_u = engine.expect(prior_u, [lambda x0, y: (x0 - gu(y)) ** 2,
                                     lambda x0, y: gu(y) ** 2, lambda x0, y: x0 * gu(y)],
                           scale=scale_u, noise_var=nv_u,
                           breakpoints=ru.breakpoints(state.lambda_u))
    if metric == "MSE_u":
        return float(vals_u[0])
    if metric == "Corr_u":
        return _rho(vals_u[2], vals_u[1], prior_moments(prior_u)[1])
    a_u0, a_u1 = vals_u[1], vals_u[2]
    rv = rule_v.copy()
    if rv.needs_channel:
        rv.set_channel(a_u1, tau_w * a_u0)
    lam = state.lambda_v if lambda_v is None else lambda_v

    def gv(y):
        return rv.value(y, lam, t)

    vals_v = engine.expect(prior_v, [lambda x0, y: (x0 - gv(y)) ** 2,
                                     lambda x0, y: gv(y) ** 2, lambda x0, y: x0 * gv(y)],
                           scale=a_u1, noise_var=tau_w * a_u0,
                           breakpoints=rv.breakpoints(lam))
    if metric == "MSE_v":
        return float(vals_v[0])
    return _rho(vals_v[2], vals_v[1], prior_moments(prior_v)[1])
