"""The IterFac iteration for rank-one factorisation.

One iteration, for t = 0, 1, ...::

    p(t)   = A v(t) / m + mu_u(t) u(t)
    u(t+1) = G_u(t, p(t), lam_u(t))
    q(t)   = A^T u(t+1) / m + mu_v(t) v(t)
    v(t+1) = G_v(t, q(t), lam_v(t))

Damping is either user supplied and nonnegative (``damping="descent"``, the
objective then decreases monotonically for prox rules) or the Onsager-type
correction (``damping="analysis"``)::

    mu_v(t)   = -(tau_w/m) sum_i dG_u/dp(p_i(t))
    mu_u(t+1) = -(tau_w/m) sum_j dG_v/dq(q_j(t))

with ``mu_u(0) = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .model import RankOneProblem, prior_moments
from .selection import LambdaFn, ProxRule, ScalarCost, SelectionRule, lambda_update


class IterFacDivergence(FloatingPointError):
    """Raised when an iterate stops being finite."""

    def __init__(self, iteration: int, what: str):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration
        self.what = what


@dataclass
class IterFacConfig:
    """Run parameters.

    ``mu_u``/``mu_v`` are only read in descent damping; a scalar is used for
    every iteration, a sequence is indexed by ``t``. ``lambda_u_fn`` and
    ``lambda_v_fn`` are the analysis-mode adaptation functions
    ``phi(t, truth, estimate)`` (``None`` means the constant 1). ``init_v`` is
    ``"prior_mean"``, ``"random"`` (unit-norm Gaussian direction scaled to
    ``sqrt(n)``) or an explicit vector. ``channel`` controls how MMSE rules
    get their scalar channel: ``"empirical"`` plugs in the second-order
    statistics against the true factors, ``"blind"`` replaces the cross
    moment by the self moment (valid under MMSE orthogonality).
    """

    max_iters: int = 10
    damping: str = "analysis"
    mu_u: Union[float, Sequence[float]] = 0.0
    mu_v: Union[float, Sequence[float]] = 0.0
    lambda_mode: str = "analysis"
    lambda_u_fn: Optional[LambdaFn] = None
    lambda_v_fn: Optional[LambdaFn] = None
    init_v: Union[str, np.ndarray] = "prior_mean"
    init_u: Optional[np.ndarray] = None
    init_seed: Optional[int] = None
    channel: str = "empirical"
    record_objective: bool = False
    cost_u: Optional[ScalarCost] = None
    cost_v: Optional[ScalarCost] = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.damping not in ("analysis", "descent"):
            raise ValueError(f"unknown damping mode {self.damping!r}")
        if self.lambda_mode not in ("analysis", "descent"):
            raise ValueError(f"unknown lambda mode {self.lambda_mode!r}")
        if self.channel not in ("empirical", "blind"):
            raise ValueError(f"unknown channel mode {self.channel!r}")
        if self.damping == "descent":
            for name in ("mu_u", "mu_v"):
                if np.any(np.asarray(getattr(self, name)) < 0):
                    raise ValueError(f"descent damping requires {name} >= 0")
        if isinstance(self.init_v, str) and self.init_v not in ("prior_mean", "random"):
            raise ValueError(f"unknown init_v {self.init_v!r}")


@dataclass
class IterFacTrajectory:
    """Iterates and statistics; row ``t`` of per-iteration arrays is iteration ``t``.

    ``u``, ``v`` and the ``alpha``/``rho`` arrays have ``T + 1`` rows (t = 0..T);
    ``p``, ``q``, ``lambda_*`` and ``mu_*`` have ``T`` rows.
    """

    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    q: np.ndarray
    lambda_u: np.ndarray
    lambda_v: np.ndarray
    mu_u: np.ndarray
    mu_v: np.ndarray
    alpha_u0: np.ndarray
    alpha_u1: np.ndarray
    alpha_v0: np.ndarray
    alpha_v1: np.ndarray
    rho_u: np.ndarray
    rho_v: np.ndarray
    objective: Optional[np.ndarray] = None

    @property
    def n_iter(self) -> int:
        return len(self.p)


def correlation(x, x0) -> float:
    """Squared cosine between ``x`` and ``x0``; zero if either vector vanishes."""
    nx, n0 = float(np.dot(x, x)), float(np.dot(x0, x0))
    if nx == 0 or n0 == 0:
        return 0.0
    return min(float(np.dot(x, x0)) ** 2 / (nx * n0), 1.0)


def analysis_damping(tau_w: float, m: int, derivatives: np.ndarray) -> float:
    """Onsager correction ``-(tau_w/m) * sum(derivatives)``."""
    return -tau_w / m * float(np.sum(derivatives))


def objective(problem: RankOneProblem, u, v, cost_u: Optional[ScalarCost] = None,
              cost_v: Optional[ScalarCost] = None) -> float:
    """``||A - u v^T||_F^2 / (2m) + sum c_u(u_i) + sum c_v(v_j)``."""
    return _objective(problem.A, u, v, cost_u, cost_v)


def _objective(A, u, v, cost_u, cost_v):
    m = A.shape[0]
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    if u.shape != (A.shape[0],) or v.shape != (A.shape[1],):
        raise ValueError("factor dimensions do not match A")
    total = float(np.sum((A - np.outer(u, v)) ** 2)) / (2 * m)
    if cost_u is not None:
        total += cost_u.total(u)
    if cost_v is not None:
        total += cost_v.total(v)
    return total


def _at(schedule, t):
    arr = np.asarray(schedule, dtype=float)
    return float(arr) if arr.ndim == 0 else float(arr[t])


def _initial_v(config: IterFacConfig, n: int, prior_v) -> np.ndarray:
    init = config.init_v
    if not isinstance(init, str):
        v = np.asarray(init, dtype=float)
        if v.shape != (n,):
            raise ValueError(f"init_v has shape {v.shape}, expected {(n,)}")
        return v.copy()
    if init == "prior_mean":
        if prior_v is None:
            raise ValueError("init_v='prior_mean' needs a prior on v")
        return np.full(n, prior_moments(prior_v)[0])
    rng = np.random.default_rng(config.init_seed)
    g = rng.standard_normal(n)
    return g * np.sqrt(n) / np.linalg.norm(g)


def _stats(x, x0, size):
    a0 = float(x @ x) / size
    a1 = float(x @ x0) / size if x0 is not None else np.nan
    rho = correlation(x, x0) if x0 is not None else np.nan
    return a0, a1, rho


def _select(rule, p, lam, t, descent_lambda):
    # In descent mode lam = mu + ||x||^2/m vanishes only when mu = 0 and the
    # other factor is exactly zero, so p = 0 and the subproblem reduces to
    # min c(x); take its minimum-norm minimiser x = 0.
    if descent_lambda and lam == 0 and not np.any(p):
        return np.zeros_like(p), np.zeros_like(p)
    return rule.value(p, lam, t), rule.derivative(p, lam, t)


def iterate(A: np.ndarray, tau_w: float, rule_u: SelectionRule, rule_v: SelectionRule,
            config: IterFacConfig, u0=None, v0=None, prior_v=None) -> IterFacTrajectory:
    """Run IterFac on a bare matrix; ``u0``/``v0`` are optional ground truth."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ValueError("A must be a 2-D array")
    m, n = A.shape
    beta = n / m
    if rule_u.side != "u" or rule_v.side != "v":
        raise ValueError("rule sides must be ('u', 'v')")
    if config.channel == "empirical" and (rule_u.needs_channel or rule_v.needs_channel):
        if u0 is None or v0 is None:
            raise ValueError("empirical channel needs the true factors; use channel='blind'")
    for name, x0, size in (("u0", u0, m), ("v0", v0, n)):
        if x0 is not None and np.shape(x0) != (size,):
            raise ValueError(f"{name} has shape {np.shape(x0)}, expected {(size,)}")
    # MMSE rules carry mutable channel state, so each run works on private copies.
    rule_u, rule_v = rule_u.copy(), rule_v.copy()
    analysis = config.damping == "analysis"
    descent_lambda = config.lambda_mode == "descent"
    cost_u = config.cost_u or (rule_u.cost if isinstance(rule_u, ProxRule) else None)
    cost_v = config.cost_v or (rule_v.cost if isinstance(rule_v, ProxRule) else None)

    u = np.zeros(m) if config.init_u is None else np.asarray(config.init_u, dtype=float).copy()
    if u.shape != (m,):
        raise ValueError(f"init_u has shape {u.shape}, expected {(m,)}")
    v = _initial_v(config, n, prior_v)

    us, vs, ps, qs = [u], [v], [], []
    lam_us, lam_vs, mu_us, mu_vs = [], [], [], []
    su, sv = [_stats(u, u0, m)], [_stats(v, v0, n)]
    objs = [_objective(A, u, v, cost_u, cost_v)] if config.record_objective else None

    mu_u = 0.0 if analysis else _at(config.mu_u, 0)
    for t in range(config.max_iters):
        a_v0, a_v1, _ = sv[-1]
        if descent_lambda:
            lam_u = lambda_update("descent", mu=mu_u, scaled_norm_sq=float(v @ v) / m)
        elif config.lambda_u_fn is None:
            lam_u = 1.0
        else:
            lam_u = lambda_update("analysis", phi=config.lambda_u_fn, truth=v0, estimate=v, t=t)
        if rule_u.needs_channel:
            cross = a_v1 if config.channel == "empirical" else a_v0
            rule_u.set_channel(beta * cross, beta * tau_w * a_v0)

        p = A @ v / m + mu_u * u
        u_next, du = _select(rule_u, p, lam_u, t, descent_lambda)
        if not (np.all(np.isfinite(u_next)) and np.all(np.isfinite(du))):
            raise IterFacDivergence(t, "u")
        mu_v = analysis_damping(tau_w, m, du) if analysis else _at(config.mu_v, t)
        su.append(_stats(u_next, u0, m))
        a_u0, a_u1, _ = su[-1]

        if descent_lambda:
            lam_v = lambda_update("descent", mu=mu_v, scaled_norm_sq=float(u_next @ u_next) / m)
        elif config.lambda_v_fn is None:
            lam_v = 1.0
        else:
            lam_v = lambda_update("analysis", phi=config.lambda_v_fn, truth=u0,
                                  estimate=u_next, t=t)
        if rule_v.needs_channel:
            cross = a_u1 if config.channel == "empirical" else a_u0
            rule_v.set_channel(cross, tau_w * a_u0)

        q = A.T @ u_next / m + mu_v * v
        v_next, dv = _select(rule_v, q, lam_v, t, descent_lambda)
        if not (np.all(np.isfinite(v_next)) and np.all(np.isfinite(dv))):
            raise IterFacDivergence(t, "v")
        sv.append(_stats(v_next, v0, n))

        ps.append(p)
        qs.append(q)
        lam_us.append(lam_u)
        lam_vs.append(lam_v)
        mu_us.append(mu_u)
        mu_vs.append(mu_v)
        u, v = u_next, v_next
        us.append(u)
        vs.append(v)
        if objs is not None:
            objs.append(_objective(A, u, v, cost_u, cost_v))
        if analysis:
            mu_u = analysis_damping(tau_w, m, dv)
        elif t + 1 < config.max_iters:
            mu_u = _at(config.mu_u, t + 1)

    su_arr, sv_arr = np.asarray(su), np.asarray(sv)
    return IterFacTrajectory(
        u=np.asarray(us), v=np.asarray(vs), p=np.asarray(ps), q=np.asarray(qs),
        lambda_u=np.asarray(lam_us), lambda_v=np.asarray(lam_vs),
        mu_u=np.asarray(mu_us), mu_v=np.asarray(mu_vs),
        alpha_u0=su_arr[:, 0], alpha_u1=su_arr[:, 1], rho_u=su_arr[:, 2],
        alpha_v0=sv_arr[:, 0], alpha_v1=sv_arr[:, 1], rho_v=sv_arr[:, 2],
        objective=None if objs is None else np.asarray(objs),
    )


def run(problem: RankOneProblem, rule_u: SelectionRule, rule_v: SelectionRule,
        config: Optional[IterFacConfig] = None) -> IterFacTrajectory:
    """Run IterFac on a generated problem, recording statistics against the truth."""
    config = config if config is not None else IterFacConfig()
    return iterate(problem.A, problem.tau_w, rule_u, rule_v, config,
                   u0=problem.u0, v0=problem.v0, prior_v=problem.prior_v)


def empirical_correlations(trajectory: IterFacTrajectory, problem: RankOneProblem):
    """Per-iteration ``(rho_u, rho_v)`` recomputed from the stored iterates."""
    rho_u = np.array([correlation(u, problem.u0) for u in trajectory.u])
    rho_v = np.array([correlation(v, problem.v0) for v in trajectory.v])
    return rho_u, rho_v
