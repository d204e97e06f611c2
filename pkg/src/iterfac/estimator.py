"""Scikit-learn style wrapper around :func:`iterfac.algorithm.iterate`."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .algorithm import IterFacConfig, iterate
from .model import BernoulliExponential, Gaussian, PointMass
from .selection import ScalarCost, make_rule

_PRIOR_TYPES = (Gaussian, BernoulliExponential, PointMass)


def _check_rule_name(name, param):
    if name not in ("linear", "mmse", "prox"):
        raise ValueError(f"{param} must be 'linear', 'mmse' or 'prox', got {name!r}")


def estimate_noise_variance(A) -> float:
    """``||A||_F^2 / (m^2 n)``: the noise variance when the rank-one part is negligible.

    It overestimates ``tau_w`` by ``||u0||^2 ||v0||^2 / (m^2 n)``; pass
    ``tau_w`` explicitly when it is known.
    """
    A = np.asarray(A, dtype=float)
    m, n = A.shape
    return float(np.sum(A**2)) / (m * m * n)


class IterFac(TransformerMixin, BaseEstimator):
    """Rank-one factorisation ``A ~ u v^T`` by IterFac.

    Parameters
    ----------
    rule_u, rule_v : {'linear', 'mmse', 'prox'}
        Factor selection rule for each side.
    prior_u, prior_v : prior objects, optional
        Required for MMSE rules; ``prior_v`` is also used for the
        ``init_v='prior_mean'`` start.
    cost_u, cost_v : ScalarCost, optional
        Penalties for prox rules (default: no penalty).
    tau_w : float, optional
        Noise variance in ``A = u0 v0^T + sqrt(m) W``. Estimated from ``A``
        when omitted.
    max_iter : int
    damping : {'analysis', 'descent'}
    mu_u, mu_v : float
        Nonnegative damping for ``damping='descent'``.
    init_v : {'prior_mean', 'random'} or array of shape (n,)
    channel : {'empirical', 'blind'}
        ``'empirical'`` needs the true factors passed to :meth:`fit`.
    random_state : int or None
        Seed for ``init_v='random'``.

    Attributes
    ----------
    u_ : ndarray of shape (m,)
    v_ : ndarray of shape (n,)
    trajectory_ : IterFacTrajectory
    n_iter_ : int
    tau_w_ : float
    """

    def __init__(self, rule_u="linear", rule_v="linear", prior_u=None, prior_v=None,
                 cost_u=None, cost_v=None, tau_w=None, max_iter=10, damping="analysis",
                 mu_u=0.0, mu_v=0.0, init_v="random", channel="blind", random_state=None):
        self.rule_u = rule_u
        self.rule_v = rule_v
        self.prior_u = prior_u
        self.prior_v = prior_v
        self.cost_u = cost_u
        self.cost_v = cost_v
        self.tau_w = tau_w
        self.max_iter = max_iter
        self.damping = damping
        self.mu_u = mu_u
        self.mu_v = mu_v
        self.init_v = init_v
        self.channel = channel
        self.random_state = random_state

    def _validate_params(self):
        _check_rule_name(self.rule_u, "rule_u")
        _check_rule_name(self.rule_v, "rule_v")
        for name in ("prior_u", "prior_v"):
            prior = getattr(self, name)
            if prior is not None and not isinstance(prior, _PRIOR_TYPES):
                raise TypeError(f"{name} must be a prior object, got {type(prior).__name__}")
        for name in ("cost_u", "cost_v"):
            cost = getattr(self, name)
            if cost is not None and not isinstance(cost, ScalarCost):
                raise TypeError(f"{name} must be a ScalarCost")
        if not isinstance(self.max_iter, numbers.Integral) or self.max_iter < 1:
            raise ValueError(f"max_iter must be a positive integer, got {self.max_iter!r}")
        if self.tau_w is not None and not self.tau_w > 0:
            raise ValueError(f"tau_w must be positive, got {self.tau_w!r}")

    def fit(self, A, y=None, u0=None, v0=None):
        """Factor ``A``; ``u0``/``v0`` are optional ground truth for diagnostics."""
        self._validate_params()
        A = check_array(A, ensure_min_samples=2, ensure_min_features=2)
        m, n = A.shape
        self.tau_w_ = float(self.tau_w) if self.tau_w is not None else estimate_noise_variance(A)
        seed = self.random_state
        if seed is not None and not isinstance(seed, numbers.Integral):
            raise ValueError("random_state must be an int or None")
        config = IterFacConfig(max_iters=self.max_iter, damping=self.damping,
                               mu_u=self.mu_u, mu_v=self.mu_v,
                               lambda_mode="descent" if self.damping == "descent" else "analysis",
                               init_v=self.init_v, init_seed=seed, channel=self.channel)
        rule_u = make_rule(self.rule_u, "u", self.prior_u, self.cost_u)
        rule_v = make_rule(self.rule_v, "v", self.prior_v, self.cost_v)
        self.trajectory_ = iterate(A, self.tau_w_, rule_u, rule_v, config,
                                   u0=None if u0 is None else np.asarray(u0, dtype=float),
                                   v0=None if v0 is None else np.asarray(v0, dtype=float),
                                   prior_v=self.prior_v)
        self.u_ = self.trajectory_.u[-1]
        self.v_ = self.trajectory_.v[-1]
        self.n_iter_ = self.trajectory_.n_iter
        self.n_features_in_ = n
        return self

    def transform(self, X):
        """Coordinates of the rows of ``X`` along ``v_``: ``X v / ||v||^2``."""
        check_is_fitted(self, "v_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        norm_sq = float(self.v_ @ self.v_)
        if norm_sq == 0:
            return np.zeros((X.shape[0], 1))
        return (X @ self.v_ / norm_sq)[:, None]

    def reconstruct(self):
        """The rank-one estimate ``u v^T``."""
        check_is_fitted(self, "v_")
        return np.outer(self.u_, self.v_)
