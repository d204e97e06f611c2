import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iterfac import montecarlo
from iterfac.model import (BernoulliExponential, Gaussian, PointMass, generate_problem,
                           tau_w_to_snr)
from iterfac.montecarlo import (BASELINE, NOISELESS_TAU_W, ExperimentConfig, SweepResult,
                                TrialRecord, _median_curves, compare_to_se,
                                finite_size_scaling, run_sweep, se_prediction, svd_baseline,
                                trial_seeds)
from iterfac.state_evolution import phase_transition_threshold, se_linear_fixed_point

BE = BernoulliExponential(0.1, 1.0)


def small_config(**kw):
    base = dict(m=80, n=40, prior_u=Gaussian(), prior_v=BE, master_seed=7,
                snr_grid_db=(0.0, 10.0), trials=4, iters=4, baseline=True, baseline_iters=20)
    base.update(kw)
    return ExperimentConfig(**base)


def cell_arrays(result):
    return [(c.snr_db, c.method, c.median_rho_u.tolist(), c.median_rho_v.tolist(),
             c.se_rho_u.tolist(), c.se_rho_v.tolist(),
             [(r.seed, r.rho_u, r.rho_v, r.status) for r in c.records])
            for c in result.cells]


def test_sweep_is_deterministic():
    a, b = run_sweep(small_config()), run_sweep(small_config())
    assert cell_arrays(a) == cell_arrays(b)
    c = run_sweep(small_config(master_seed=8))
    assert cell_arrays(a) != cell_arrays(c)


def test_threads_match_serial():
    assert cell_arrays(run_sweep(small_config(threads=3))) == cell_arrays(run_sweep(small_config()))


def test_sweep_cells_carry_empirical_and_se():
    res = run_sweep(small_config())
    assert len(res.cells) == 2 * 3
    for c in res.cells:
        assert np.all(np.isfinite(c.median_rho_v)) and np.all(np.isfinite(c.se_rho_v))
        assert len(c.records) == 4 and c.trials_ok == 4
        length = 1 if c.method == BASELINE else 5
        assert c.median_rho_v.shape == c.se_rho_v.shape == (length,)
    assert res.cell(10.0, "mmse").method == "mmse"
    with pytest.raises(KeyError):
        res.cell(3.0, "mmse")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**63), st.integers(0, 100), st.integers(1, 500))
def test_trial_seeds_distinct(master, index, trials):
    seeds = trial_seeds(master, index, trials)
    assert len(seeds) == trials and len(set(seeds.tolist())) == trials
    np.testing.assert_array_equal(seeds, trial_seeds(master, index, trials))


def test_grid_points_get_different_seeds():
    assert not set(trial_seeds(1, 0, 50).tolist()) & set(trial_seeds(1, 1, 50).tolist())


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.randoms(use_true_random=False))
def test_medians_invariant_to_trial_order(trials, rnd):
    rng = np.random.default_rng(trials)
    records = [TrialRecord(k, k, rng.uniform(size=3).tolist(), rng.uniform(size=3).tolist())
               for k in range(trials)]
    shuffled = list(records)
    rnd.shuffle(shuffled)
    for a, b in zip(_median_curves(records, 3), _median_curves(shuffled, 3)):
        np.testing.assert_array_equal(a, b)


def test_failed_trials_excluded_from_medians():
    records = [TrialRecord(0, 0, [0.2], [0.3]), TrialRecord(1, 1, [], [], "failed"),
               TrialRecord(2, 2, [0.4], [0.5])]
    med_u, med_v = _median_curves(records, 1)
    assert med_u[0] == pytest.approx(0.3) and med_v[0] == pytest.approx(0.4)
    assert np.isnan(_median_curves(records[1:2], 2)[0]).all()


def test_noiseless_linear_single_trial():
    cfg = small_config(m=400, n=200, tau_w_grid=(0.0,), snr_grid_db=None, trials=1,
                       methods=("linear",), baseline=False)
    assert cfg.tau_w_grid == (NOISELESS_TAU_W,)
    cell = run_sweep(cfg).cells[0]
    assert cell.final_median_rho_v >= 1 - 1e-6
    assert cell.final_se_rho_v == pytest.approx(1.0, abs=1e-12)


def test_svd_noiseless_exact():
    prob = generate_problem(120, 60, Gaussian(), BE, 1e-300, 3)
    u, v, rho_u, rho_v = svd_baseline(prob, 50, seed=1)
    assert rho_u == pytest.approx(1.0, abs=1e-8) and rho_v == pytest.approx(1.0, abs=1e-8)
    assert np.linalg.norm(u) == pytest.approx(1.0) and np.linalg.norm(v) == pytest.approx(1.0)


def test_svd_transpose_symmetry():
    prob = generate_problem(300, 150, Gaussian(), BE, 0.05, 4)
    _, _, ru, rv = svd_baseline(prob, 500, seed=2)
    tr = prob.transpose()
    assert tr.beta == pytest.approx(1 / prob.beta)
    _, _, tu, tv = svd_baseline(tr, 500, seed=3)
    assert (tu, tv) == pytest.approx((rv, ru), abs=1e-8)


def test_svd_errors():
    prob = generate_problem(10, 5, PointMass(0.0), PointMass(0.0), 1.0, 0)
    zero = dataclasses.replace(prob, A=np.zeros((10, 5)))
    with pytest.raises(ValueError, match="zero matrix"):
        svd_baseline(zero)
    with pytest.raises(ValueError):
        svd_baseline(prob, 0)


def test_compare_self_is_zero():
    res = run_sweep(small_config())
    for c in res.cells:
        c.median_rho_u, c.median_rho_v = c.se_rho_u.copy(), c.se_rho_v.copy()
    comp = compare_to_se(res, per_iteration=True)
    assert comp.max_deviation == 0.0 and comp.passed and not comp.failures()
    assert set(comp.deviations) == {(s, m) for s in (0.0, 10.0) for m in ("linear", "mmse", "svd")}


def test_compare_flags_failures():
    res = run_sweep(small_config(baseline=False))
    for c in res.cells:
        c.median_rho_v = c.se_rho_v.copy()
    res.cells[0].median_rho_v = res.cells[0].se_rho_v + 0.2
    comp = compare_to_se(res, tolerance=0.05)
    assert not comp.passed
    assert list(comp.failures()) == [(0.0, "linear")]
    assert compare_to_se(res, methods=("mmse",)).passed


def test_degraded_cells(monkeypatch):
    real = montecarlo.run
    calls = {"n": 0}

    def flaky(problem, rule_u, rule_v, config):
        calls["n"] += 1
        if calls["n"] % 2 == 0:
            raise FloatingPointError("overflow")
        return real(problem, rule_u, rule_v, config)

    monkeypatch.setattr(montecarlo, "run", flaky)
    res = run_sweep(small_config(methods=("linear",), baseline=False, snr_grid_db=(5.0,)))
    cell = res.cells[0]
    assert cell.trials_failed == 2 and cell.degraded and res.degraded
    failed = [r for r in cell.records if r.status == "failed"]
    assert failed[0].message == "overflow"
    assert np.isfinite(cell.final_median_rho_v)


@pytest.mark.parametrize("kw", [dict(trials=0), dict(iters=0), dict(snr_grid_db=()),
                                dict(snr_grid_db=(1.0, 1.0)), dict(snr_grid_db=(2.0, 1.0)),
                                dict(tau_w_grid=(0.1,)), dict(methods=("svd",)),
                                dict(methods=("linear", "linear")), dict(init="zeros"),
                                dict(methods=(), baseline=False), dict(m=0),
                                dict(snr_grid_db=(np.inf,))])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        small_config(**kw)


def test_tau_w_grid_must_increase_snr():
    with pytest.raises(ValueError):
        small_config(snr_grid_db=None, tau_w_grid=(0.1, 0.5))
    cfg = small_config(snr_grid_db=None, tau_w_grid=(0.5, 0.1))
    assert [w for _, w in cfg.noise_points()] == [0.5, 0.1]


def test_se_curves_flatten_by_iteration_eight():
    cfg = ExperimentConfig(1000, 500, Gaussian(), BE, 0, snr_grid_db=(3.0, 10.0), iters=10)
    for _, tau_w in cfg.noise_points():
        for method in ("linear", "mmse"):
            _, rho_v = se_prediction(cfg, method, tau_w)
            assert abs(rho_v[8] - rho_v[10]) <= 0.01


@pytest.mark.slow
def test_zero_initial_condition_reproduction():
    pg = Gaussian(0.0, 1.0)
    threshold = phase_transition_threshold(0.5, 1.0, 1.0)
    below = tau_w_to_snr(1.5 * threshold, 1.0, 1.0)
    cfg = ExperimentConfig(1000, 500, pg, pg, 11, methods=("mmse",), snr_grid_db=(below, 10.0),
                           trials=10, iters=10, init="random", baseline=True)
    res = run_sweep(cfg)
    assert res.cell(below, "mmse").final_median_rho_v < 0.1
    svd = res.cell(10.0, "svd")
    fixed = se_linear_fixed_point(0.5, 1.0, 1.0, cfg.noise_points()[1][1])[1]
    assert abs(svd.final_median_rho_v - fixed) <= 0.05


@pytest.mark.slow
def test_finite_size_scaling():
    # MMSE around the threshold, where the finite-size bias exceeds the
    # sampling noise of a 50-trial median
    cfg = ExperimentConfig(1000, 500, Gaussian(), BE, 3, methods=("mmse",),
                           snr_grid_db=(-1.0, 0.0, 1.0, 2.0, 3.0), trials=50, iters=10)
    small, large = finite_size_scaling(cfg)
    assert set(small.deviations) == set(large.deviations)
    assert large.max_deviation <= small.max_deviation
    for key in small.failures():
        assert large.deviations[key] <= small.deviations[key], (small.deviations,
                                                                 large.deviations)


def test_sweep_result_by_method():
    res = SweepResult(small_config(), [])
    assert res.by_method("linear") == [] and not res.degraded
