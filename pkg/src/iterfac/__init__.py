"""Iterative rank-one matrix factorisation with state-evolution analysis."""
from .algorithm import (IterFacConfig, IterFacDivergence, IterFacTrajectory, correlation,
                        iterate, objective, run)
from .estimator import IterFac
from .model import (BernoulliExponential, Gaussian, PointMass, RankOneProblem,
                    generate_problem, prior_moments, sample_prior, snr_to_tau_w, tau_w_to_snr)
from .montecarlo import ExperimentConfig, SweepResult, compare_to_se, run_sweep, svd_baseline
from .selection import LinearRule, MMSERule, ProxRule, ScalarCost, make_rule
from .state_evolution import (ExpectationEngine, SEState, mmse_function,
                              phase_transition_threshold, se_linear_fixed_point,
                              se_linear_trajectory, se_mmse_trajectory, se_step, se_trajectory)

__version__ = "0.1.0"
