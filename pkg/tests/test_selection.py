import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from iterfac.model import BernoulliExponential, Gaussian, PointMass
from iterfac.selection import (LinearRule, MMSERule, ProxRule, ScalarCost,
                               bernoulli_exp_log_marginal, bernoulli_exp_posterior,
                               constant_lambda, gaussian_posterior, lambda_update, make_rule,
                               mmse_denoiser_bernoulli_exp, posterior_moments, select,
                               select_derivative)

KINDS = ("zero", "l1", "nonnegative_l1", "squared_l2")


def grid_prox(cost, p, lam):
    """Brute-force minimiser of -p x + c(x) + lam/2 x^2 on a two-level grid."""
    def obj(x):
        return -p * x + cost(x) + 0.5 * lam * x**2
    centre = p / lam
    coarse = np.linspace(centre - 20, centre + 20, 400_001)
    best = coarse[np.argmin(obj(coarse))]
    fine = np.linspace(best - 2e-4, best + 2e-4, 40_001)
    return obj(fine).min(), obj


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(KINDS), st.floats(0, 3), st.floats(-8, 8), st.floats(0.1, 5))
def test_prox_beats_grid_oracle(kind, weight, p, lam):
    cost = ScalarCost(kind, weight)
    best, obj = grid_prox(cost, p, lam)
    assert obj(cost.prox(p, lam)) <= best + 1e-8


@pytest.mark.parametrize("kind", KINDS)
def test_prox_derivative_finite_difference(kind):
    cost = ScalarCost(kind, 0.6)
    p = np.linspace(-4, 4, 81) + 0.013
    h = 1e-6
    fd = (cost.prox(p + h, 1.7) - cost.prox(p - h, 1.7)) / (2 * h)
    np.testing.assert_allclose(cost.prox_derivative(p, 1.7), fd, rtol=1e-5, atol=1e-8)


def test_soft_threshold_reference():
    cost = ScalarCost("l1", 1.0)
    np.testing.assert_allclose(cost.prox([-3.0, -0.5, 0.5, 3.0], 2.0), [-1.0, 0, 0, 1.0])
    assert ScalarCost("nonnegative_l1", 1.0).prox(-3.0, 1.0) == 0.0
    assert ScalarCost("squared_l2", 1.0).prox(3.0, 2.0) == pytest.approx(1.0)


def test_nonpositive_curvature_is_nonconvex():
    with pytest.raises(ValueError, match="nonconvex"):
        ScalarCost("l1", 1.0).prox(1.0, 0.0)
    with pytest.raises(ValueError, match="nonconvex"):
        ProxRule().lipschitz(-1.0)


def test_cost_validation():
    with pytest.raises(ValueError):
        ScalarCost("l2", 1.0)
    with pytest.raises(ValueError):
        ScalarCost("l1", -0.1)
    assert ScalarCost("nonnegative_l1", 1.0)(-1.0) == np.inf


def quad_posterior(prior, p, scale, noise_var):
    """Posterior mean/variance by direct integration of prior x likelihood."""
    def lik(x):
        return np.exp(-0.5 * (p - scale * x) ** 2 / noise_var)
    if isinstance(prior, Gaussian):
        def dens(x):
            return np.exp(-0.5 * (x - prior.mean) ** 2 / prior.variance)
        moments = [integrate.quad(lambda x: x**k * dens(x) * lik(x), -np.inf, np.inf,
                                  epsabs=0, epsrel=1e-13, limit=400)[0] for k in range(3)]
    else:
        lam, r = prior.sparsity, prior.rate
        moments = []
        for k in range(3):
            slab = integrate.quad(lambda x: x**k * r * np.exp(-r * x) * lik(x), 0, np.inf,
                                  epsabs=0, epsrel=1e-13, limit=400)[0]
            atom = (1 - lam) * lik(0.0) if k == 0 else 0.0
            moments.append(atom + lam * slab)
    m0, m1, m2 = moments
    return m1 / m0, m2 / m0 - (m1 / m0) ** 2


@pytest.mark.parametrize("p", [-3.0, -0.4, 0.0, 0.3, 1.2, 4.0])
@pytest.mark.parametrize("scale,noise_var", [(1.0, 0.25), (0.4, 1.0), (2.0, 0.05)])
def test_bernoulli_exponential_posterior_matches_quadrature(p, scale, noise_var):
    prior = BernoulliExponential(0.1, 1.0)
    mean, var = bernoulli_exp_posterior(p, 0.1, 1.0, scale, noise_var)
    q_mean, q_var = quad_posterior(prior, p, scale, noise_var)
    assert mean == pytest.approx(q_mean, abs=1e-8)
    assert var == pytest.approx(q_var, abs=1e-8)


def test_mmse_denoiser_reference_value():
    # frozen from adaptive quadrature (see test above): lambda=0.1, rate=1, a=1, s2=0.25, p=2
    mean, _ = mmse_denoiser_bernoulli_exp(0.1, 1.0, 1.0, 0.25, 2.0)
    assert mean == pytest.approx(1.7233591216, abs=1e-9)


def test_bernoulli_exponential_extremes_are_finite():
    p = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
    mean, var = bernoulli_exp_posterior(p, 0.1, 1.0, 1.0, 0.01)
    assert np.all(np.isfinite(mean)) and np.all(np.isfinite(var))
    assert np.all(var >= 0)
    assert mean[-1] == pytest.approx(1e4 - 0.01, rel=1e-9)
    assert bernoulli_exp_posterior(2.0, 0.1, 1.0, 1.0, 0.5)[0].shape == ()


def test_negative_scale_is_reflection():
    a = bernoulli_exp_posterior(1.3, 0.2, 1.5, -0.7, 0.3)
    b = bernoulli_exp_posterior(-1.3, 0.2, 1.5, 0.7, 0.3)
    np.testing.assert_allclose(a, b)


@pytest.mark.parametrize("scale,noise_var", [(1.0, 0.25), (0.3, 2.0)])
def test_log_marginal_is_a_density(scale, noise_var):
    def f(y):
        return np.exp(bernoulli_exp_log_marginal(y, 0.1, 1.0, scale, noise_var))
    total = sum(integrate.quad(f, lo, hi, limit=400)[0]
                for lo, hi in [(-np.inf, 0), (0, 10), (10, np.inf)])
    assert total == pytest.approx(1.0, abs=1e-9)


def test_gaussian_posterior_matches_quadrature():
    prior = Gaussian(0.3, 2.0)
    for p in (-2.0, 0.1, 3.0):
        mean, var = gaussian_posterior(p, 0.3, 2.0, 0.8, 0.5)
        q_mean, q_var = quad_posterior(prior, p, 0.8, 0.5)
        assert mean == pytest.approx(q_mean, abs=1e-9)
        assert var == pytest.approx(q_var, abs=1e-9)


def test_uninformative_channel_returns_prior_moments():
    mean, var = posterior_moments(BernoulliExponential(0.1), np.zeros(3), 0.0, 0.0)
    np.testing.assert_allclose(mean, 0.1)
    np.testing.assert_allclose(var, 0.19)
    assert posterior_moments(PointMass(2.0), 1.0, 1.0, 1.0)[0] == 2.0


RULES = [LinearRule(), ProxRule(ScalarCost("l1", 0.5)), ProxRule(ScalarCost("squared_l2", 1.0)),
         MMSERule(Gaussian(0.2, 1.5), scale=0.9, noise_var=0.4),
         MMSERule(BernoulliExponential(0.1, 1.0), scale=0.9, noise_var=0.4),
         MMSERule(BernoulliExponential(0.5, 2.0), scale=2.0, noise_var=0.1)]


@pytest.mark.parametrize("rule", RULES, ids=repr)
def test_rule_derivatives_match_finite_differences(rule):
    p = np.linspace(-3, 5, 97) + 0.0071
    if isinstance(rule, ProxRule):
        p = p[np.abs(np.abs(p) - rule.cost.weight) > 1e-3]
    h = 1e-5
    fd = (select(rule, 0, p + h, 1.3) - select(rule, 0, p - h, 1.3)) / (2 * h)
    an = select_derivative(rule, 0, p, 1.3)
    assert np.max(np.abs(fd - an) / np.maximum(np.abs(an), 1e-3)) <= 1e-5


@pytest.mark.parametrize("rule", RULES, ids=repr)
def test_lipschitz_bounds_slope(rule):
    p = np.linspace(-10, 10, 2001)
    slopes = np.abs(np.diff(select(rule, 0, p, 1.3))) / np.diff(p)
    assert slopes.max() <= rule.lipschitz(1.3) * (1 + 1e-6) + 1e-12


def test_mmse_rule_channel_and_copy():
    rule = MMSERule(Gaussian(), "v")
    clone = rule.copy()
    clone.set_channel(2.0, 0.5)
    assert rule.scale == 1.0 and clone.scale == 2.0
    with pytest.raises(ValueError):
        clone.set_channel(1.0, 0.0)
    clone.set_channel(0.0, 0.0)
    assert clone.derivative(np.ones(2)).tolist() == [0.0, 0.0]


def test_make_rule():
    assert isinstance(make_rule("linear", "u"), LinearRule)
    assert make_rule("mmse", "v", Gaussian()).side == "v"
    assert make_rule("prox", "u", cost=ScalarCost("l1", 1.0)).cost.kind == "l1"
    with pytest.raises(ValueError):
        make_rule("mmse", "u")
    with pytest.raises(ValueError):
        make_rule("cubic", "u")


def test_lambda_update_modes():
    assert lambda_update("descent", mu=0.5, scaled_norm_sq=2.0) == 2.5
    phi = constant_lambda(3.0)
    assert lambda_update("analysis", phi=phi, truth=np.ones(4), estimate=np.ones(4)) == 3.0
    with pytest.raises(ValueError):
        lambda_update("descent", mu=0.5)
    with pytest.raises(ValueError):
        lambda_update("other")
