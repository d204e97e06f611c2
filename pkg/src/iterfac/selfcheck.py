"""Fast self-test suite behind ``iterfac selfcheck``.

Each check compares an implementation against an independent oracle and
returns a :class:`CheckResult`; the whole suite runs in well under a minute.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .algorithm import IterFacConfig, run
from .model import BernoulliExponential, Gaussian, generate_problem, snr_to_tau_w
from .selection import LinearRule, MMSERule, ProxRule, ScalarCost
from .state_evolution import (ExpectationEngine, initial_state, mmse_function,
                              se_linear_fixed_point, se_linear_trajectory, se_step,
                              se_trajectory)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _check_prox_oracle():
    rng = np.random.default_rng(11)
    grid = np.linspace(-12, 12, 240_001)
    worst = -np.inf
    for kind in ("zero", "l1", "nonnegative_l1", "squared_l2"):
        cost = ScalarCost(kind, 0.7)
        for p, lam in zip(rng.normal(0, 3, 20), rng.uniform(0.2, 3, 20)):
            def obj(x):
                return lam * (x - p / lam) ** 2 / 2 + cost(x)
            x = cost.prox(p, lam)
            # refine the grid minimum around its best point
            x_grid = grid[np.argmin(obj(grid))]
            fine = np.linspace(x_grid - 1e-4, x_grid + 1e-4, 20_001)
            worst = max(worst, float(obj(x) - obj(fine).min()))
    return worst <= 1e-8, f"max prox excess over grid oracle {worst:.2e}"


def _check_derivatives():
    rng = np.random.default_rng(12)
    rules = [LinearRule(), ProxRule(ScalarCost("l1", 0.5)),
             ProxRule(ScalarCost("nonnegative_l1", 0.5)), ProxRule(ScalarCost("squared_l2", 2)),
             MMSERule(Gaussian(0.3, 2.0), scale=0.8, noise_var=0.5),
             MMSERule(BernoulliExponential(0.1, 1.0), scale=0.8, noise_var=0.5)]
    worst, h = 0.0, 1e-5
    for rule in rules:
        p = rng.normal(0, 2, 50)
        lam = 1.3
        if isinstance(rule, ProxRule) and rule.cost.kind != "squared_l2":
            # stay clear of the kinks at |p| = weight
            p = p[np.abs(np.abs(p) - rule.cost.weight) > 1e-3]
        fd = (rule.value(p + h, lam) - rule.value(p - h, lam)) / (2 * h)
        an = rule.derivative(p, lam)
        rel = np.abs(fd - an) / np.maximum(np.abs(an), 1e-3)
        worst = max(worst, float(rel.max()))
    return worst <= 1e-5, f"max relative finite-difference error {worst:.2e}"


def _check_se_engines():
    pu, pv = Gaussian(0, 1), BernoulliExponential(0.1, 1)
    gh = ExpectationEngine()
    mc = ExpectationEngine("monte_carlo", samples=400_000, seed=5)
    state = initial_state(pu, pv, "correlated", eps=0.5)
    rule_u = ProxRule(ScalarCost("l1", 0.02), "u")
    rule_v = ProxRule(ScalarCost("nonnegative_l1", 0.02), "v")
    _, a = se_step(state, rule_u, rule_v, pu, pv, 0.5, 0.05, gh)
    _, b = se_step(state, rule_u, rule_v, pu, pv, 0.5, 0.05, mc)
    fields = ("alpha_u0", "alpha_u1", "alpha_v0", "alpha_v1")
    dev = max(abs(getattr(a, f) - getattr(b, f)) / max(abs(getattr(a, f)), 1e-12)
              for f in fields)
    return dev <= 0.02, f"max relative quadrature vs sampling gap {dev:.2e}"


def _check_linear_fixed_point():
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(20):
        beta, tu, tv = rng.uniform(0.1, 2), rng.uniform(0.2, 2), rng.uniform(0.2, 2)
        tw = rng.uniform(0.05, 1.0) * np.sqrt(beta) * tu * tv
        ru, rv = se_linear_trajectory(0.5, beta, tu, tv, tw, 5000)
        fu, fv = se_linear_fixed_point(beta, tu, tv, tw)
        worst = max(worst, abs(ru[-1] - fu), abs(rv[-1] - fv))
    return worst <= 1e-10, f"max distance to closed-form fixed point {worst:.2e}"


def _check_mmse_identity():
    pu, pv = Gaussian(0, 1), BernoulliExponential(0.1, 1)
    states = se_trajectory(MMSERule(pu, "u"), MMSERule(pv, "v"), pu, pv, 0.5, 0.1, 5)
    worst = 0.0
    for prev, s in zip(states[:-1], states[1:]):
        target = 1.0 - mmse_function(pu, 0.5 * prev.alpha_v1**2 / (0.1 * prev.alpha_v0))
        worst = max(worst, abs(s.alpha_u0 - s.alpha_u1), abs(s.alpha_u0 - target))
    return worst <= 1e-8, f"max |a_u0 - a_u1|, |a_u0 - (tau_u - E_u)| {worst:.2e}"


def _check_damping():
    """Recorded damping equals -(tau_w/m) sum G', and linear IterFac tracks its SE."""
    pu, pv = Gaussian(0, 1), BernoulliExponential(0.1, 1)
    tw = snr_to_tau_w(10.0, 1.0, 0.2)
    prob = generate_problem(2000, 1000, pu, pv, tw, 17)
    rule_u, rule_v = ProxRule(ScalarCost("l1", 0.02), "u"), ProxRule(ScalarCost("l1", 0.02), "v")
    tr = run(prob, rule_u, rule_v, IterFacConfig(max_iters=5))
    expect_v = np.array([-tw * np.mean(rule_u.derivative(p, 1.0)) for p in tr.p])
    expect_u = np.array([0.0] + [-tw / prob.m * np.sum(rule_v.derivative(q, 1.0))
                                 for q in tr.q[:-1]])
    gap = max(np.abs(tr.mu_v - expect_v).max(), np.abs(tr.mu_u - expect_u).max())
    rho = []
    for seed in range(5):
        p = generate_problem(2000, 1000, pu, pv, tw, 100 + seed)
        rho.append(run(p, LinearRule("u"), LinearRule("v"), IterFacConfig()).rho_v[-1])
    se = se_linear_trajectory(0.05, 0.5, 1.0, 0.2, tw, 10)[1][-1]
    track = abs(np.median(rho) - se)
    ok = gap <= 1e-12 and track <= 0.05
    return ok, f"damping identity gap {gap:.1e}, linear median vs SE {track:.3f}"


CHECKS: dict[str, Callable[[], tuple]] = {
    "prox_grid_oracle": _check_prox_oracle,
    "derivative_finite_difference": _check_derivatives,
    "se_engine_agreement": _check_se_engines,
    "linear_fixed_point": _check_linear_fixed_point,
    "mmse_orthogonality": _check_mmse_identity,
    "damping": _check_damping,
}


def run_checks(names=None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        if names is not None and name not in names:
            continue
        try:
            passed, detail = fn()
        except Exception as exc:  # a crash is a failed check, reported by name
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail))
    return results
