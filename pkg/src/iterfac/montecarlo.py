"""Monte Carlo sweeps over SNR with SE predictions and a power-iteration baseline.

Trial ``k`` at grid point ``i`` draws its problem from the seed
``SeedSequence([master_seed, i]).generate_state(trials)[k]``; every method
sees the same problem instance, so method comparisons are paired.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .algorithm import IterFacConfig, IterFacDivergence, correlation, run
from .model import (Prior, RankOneProblem, generate_problem, prior_moments, snr_to_tau_w,
                    tau_w_to_snr)
from .selection import ScalarCost, make_rule
from .state_evolution import (mmse_initial_rho_v, se_linear_fixed_point, se_linear_trajectory,
                              se_mmse_trajectory, se_trajectory)

METHODS = ("linear", "mmse", "prox")
BASELINE = "svd"
# Stand-in for tau_w = 0 so that SNR values stay finite.
NOISELESS_TAU_W = 1e-30


@dataclass
class ExperimentConfig:
    """Sweep definition.

    The noise grid is given either as ``snr_grid_db`` or as ``tau_w_grid``
    (exactly one); a zero in ``tau_w_grid`` means noiseless and is stored as
    ``NOISELESS_TAU_W``. ``init`` is ``"prior_mean"`` or ``"random"``.
    """

    m: int
    n: int
    prior_u: Prior
    prior_v: Prior
    master_seed: int
    methods: tuple = ("linear", "mmse")
    snr_grid_db: Optional[tuple] = None
    tau_w_grid: Optional[tuple] = None
    trials: int = 50
    iters: int = 10
    cost_u: Optional[ScalarCost] = None
    cost_v: Optional[ScalarCost] = None
    baseline: bool = False
    baseline_iters: int = 100
    init: str = "prior_mean"
    channel: str = "empirical"
    threads: int = 1

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be positive")
        if self.trials < 1 or self.iters < 1 or self.baseline_iters < 1:
            raise ValueError("trials, iters and baseline_iters must be >= 1")
        self.methods = tuple(self.methods)
        if not self.methods and not self.baseline:
            raise ValueError("nothing to run: no methods and no baseline")
        for meth in self.methods:
            if meth not in METHODS:
                raise ValueError(f"unknown method {meth!r}; expected one of {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("methods must be distinct")
        if (self.snr_grid_db is None) == (self.tau_w_grid is None):
            raise ValueError("give exactly one of snr_grid_db and tau_w_grid")
        grid = self.snr_grid_db if self.snr_grid_db is not None else self.tau_w_grid
        grid = tuple(float(g) for g in grid)
        if not grid:
            raise ValueError("noise grid is empty")
        if not np.all(np.isfinite(grid)):
            raise ValueError("noise grid must be finite")
        if self.snr_grid_db is not None:
            if np.any(np.diff(grid) <= 0):
                raise ValueError("snr_grid_db must be strictly increasing")
            self.snr_grid_db = grid
        else:
            if min(grid) < 0:
                raise ValueError("tau_w values must be nonnegative")
            grid = tuple(g if g > 0 else NOISELESS_TAU_W for g in grid)
            if np.any(np.diff(grid) >= 0):
                raise ValueError("tau_w_grid must be strictly decreasing (increasing SNR)")
            self.tau_w_grid = grid
        if self.init not in ("prior_mean", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.channel not in ("empirical", "blind"):
            raise ValueError(f"unknown channel {self.channel!r}")
        if self.threads < 0:
            raise ValueError("threads must be >= 0")

    @property
    def beta(self) -> float:
        return self.n / self.m

    def noise_points(self) -> list[tuple[float, float]]:
        """``(snr_db, tau_w)`` pairs in grid order."""
        tau_u = prior_moments(self.prior_u)[1]
        tau_v = prior_moments(self.prior_v)[1]
        if self.snr_grid_db is not None:
            return [(s, snr_to_tau_w(s, tau_u, tau_v)) for s in self.snr_grid_db]
        return [(tau_w_to_snr(w, tau_u, tau_v), w) for w in self.tau_w_grid]


@dataclass
class TrialRecord:
    trial: int
    seed: int
    rho_u: list
    rho_v: list
    status: str = "ok"
    n_iter: int = 0
    message: str = ""


@dataclass
class SweepCell:
    """One ``(snr, method)`` cell; curves are indexed by iteration ``0..iters``.

    The baseline cell (method ``"svd"``) has a single-entry curve holding the
    final power-iteration correlations and the linear fixed point as its SE value.
    """

    snr_db: float
    tau_w: float
    method: str
    iterations: np.ndarray
    median_rho_u: np.ndarray
    median_rho_v: np.ndarray
    se_rho_u: np.ndarray
    se_rho_v: np.ndarray
    records: list = field(default_factory=list)

    @property
    def trials_ok(self) -> int:
        return sum(r.status == "ok" for r in self.records)

    @property
    def trials_failed(self) -> int:
        return len(self.records) - self.trials_ok

    @property
    def degraded(self) -> bool:
        return self.trials_failed > 0.1 * len(self.records)

    @property
    def final_median_rho_v(self) -> float:
        return float(self.median_rho_v[-1])

    @property
    def final_se_rho_v(self) -> float:
        return float(self.se_rho_v[-1])


@dataclass
class SweepResult:
    config: ExperimentConfig
    cells: list

    def cell(self, snr_db: float, method: str) -> SweepCell:
        for c in self.cells:
            if c.method == method and np.isclose(c.snr_db, snr_db, rtol=0, atol=1e-9):
                return c
        raise KeyError((snr_db, method))

    def by_method(self, method: str) -> list:
        return [c for c in self.cells if c.method == method]

    @property
    def degraded(self) -> bool:
        return any(c.degraded for c in self.cells)


def trial_seeds(master_seed: int, grid_index: int, trials: int) -> np.ndarray:
    """Distinct 64-bit seeds for the trials at one grid point."""
    seq = np.random.SeedSequence([int(master_seed), int(grid_index)])
    while True:
        seeds = seq.generate_state(trials, dtype=np.uint64)
        if len(np.unique(seeds)) == trials:
            return seeds
        # collisions are astronomically unlikely; redraw from a child stream if one occurs
        seq = seq.spawn(1)[0]


def _aux_seed(seed: int, key: int) -> np.random.SeedSequence:
    # generate_problem consumes spawn keys 0-2 of SeedSequence(seed)
    return np.random.SeedSequence(int(seed), spawn_key=(key,))


def svd_baseline(problem: RankOneProblem, iters: int = 100, seed=0):
    """Leading singular pair of ``A`` by alternating power iteration.

    Starts from a random unit ``v`` drawn from ``seed`` and returns
    ``(u_hat, v_hat, rho_u, rho_v)``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    A = problem.A
    if not np.any(A):
        raise ValueError("power iteration on a zero matrix")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(problem.n)
    v /= np.linalg.norm(v)
    u = np.zeros(problem.m)
    for _ in range(iters):
        u = A @ v
        nu = np.linalg.norm(u)
        if nu == 0:
            raise ValueError("power iteration hit the null space of A")
        u /= nu
        v = A.T @ u
        v /= np.linalg.norm(v)
    return u, v, correlation(u, problem.u0), correlation(v, problem.v0)


def rules_for(config: ExperimentConfig, method: str):
    if method == "prox":
        return (make_rule("prox", "u", cost=config.cost_u),
                make_rule("prox", "v", cost=config.cost_v))
    return make_rule(method, "u", config.prior_u), make_rule(method, "v", config.prior_v)


def _run_trial(config: ExperimentConfig, tau_w: float, k: int, seed: int, methods):
    """All methods (and the baseline) on one problem instance."""
    problem = generate_problem(config.m, config.n, config.prior_u, config.prior_v, tau_w,
                               int(seed))
    init_seed = _aux_seed(seed, 3)
    out = {}
    for method in methods:
        rule_u, rule_v = rules_for(config, method)
        it_cfg = IterFacConfig(max_iters=config.iters,
                               init_v="random" if config.init == "random" else "prior_mean",
                               init_seed=init_seed, channel=config.channel)
        try:
            tr = run(problem, rule_u, rule_v, it_cfg)
            rho_u, rho_v = tr.rho_u, tr.rho_v
            if not (np.all(np.isfinite(rho_u)) and np.all(np.isfinite(rho_v))):
                raise IterFacDivergence(tr.n_iter, "correlation")
            out[method] = TrialRecord(k, int(seed), rho_u.tolist(), rho_v.tolist(), "ok",
                                      tr.n_iter)
        except (IterFacDivergence, FloatingPointError, ValueError) as exc:
            out[method] = TrialRecord(k, int(seed), [], [], "failed", 0, str(exc))
    if config.baseline:
        try:
            _, _, ru, rv = svd_baseline(problem, config.baseline_iters, _aux_seed(seed, 4))
            out[BASELINE] = TrialRecord(k, int(seed), [ru], [rv], "ok", config.baseline_iters)
        except ValueError as exc:
            out[BASELINE] = TrialRecord(k, int(seed), [], [], "failed", 0, str(exc))
    return out


def initial_rho_v(config: ExperimentConfig) -> float:
    """Large-system correlation of the starting ``v``.

    ``prior_mean`` gives ``(E V0)^2 / tau_v``. A random direction has expected
    squared cosine ``1 / n`` with any fixed vector, which is used in place of
    its vanishing limit so the SE can leave the zero fixed point.
    """
    if config.init == "prior_mean":
        return mmse_initial_rho_v(config.prior_v)
    return 1.0 / config.n


def se_prediction(config: ExperimentConfig, method: str, tau_w: float):
    """SE curves ``(rho_u, rho_v)`` over iterations ``0..iters``."""
    tau_u = prior_moments(config.prior_u)[1]
    tau_v = prior_moments(config.prior_v)[1]
    rho_v0 = initial_rho_v(config)
    if method == "linear":
        return se_linear_trajectory(rho_v0, config.beta, tau_u, tau_v, tau_w, config.iters)
    if method == "mmse":
        return se_mmse_trajectory(rho_v0, config.beta, tau_u, tau_v, tau_w, config.prior_u,
                                  config.prior_v, config.iters)
    rule_u, rule_v = rules_for(config, method)
    if config.init == "prior_mean":
        states = se_trajectory(rule_u, rule_v, config.prior_u, config.prior_v, config.beta,
                               tau_w, config.iters)
    else:
        # random init is normalised to ||v|| = sqrt(n), i.e. unit second moment
        states = se_trajectory(rule_u, rule_v, config.prior_u, config.prior_v, config.beta,
                               tau_w, config.iters, init="correlated", eps=rho_v0,
                               second_moment=1.0)
    return (np.array([s.rho_u for s in states]), np.array([s.rho_v for s in states]))


def _median_curves(records, length):
    ok = [r for r in records if r.status == "ok"]
    if not ok:
        nan = np.full(length, np.nan)
        return nan, nan.copy()
    return (np.median(np.array([r.rho_u for r in ok]), axis=0),
            np.median(np.array([r.rho_v for r in ok]), axis=0))


def _workers(threads: int) -> int:
    if threads == 0:
        return os.cpu_count() or 1
    return threads


def run_sweep(config: ExperimentConfig) -> SweepResult:
    """Run every method at every grid point and attach SE predictions."""
    cells = []
    workers = _workers(config.threads)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for i, (snr_db, tau_w) in enumerate(config.noise_points()):
            seeds = trial_seeds(config.master_seed, i, config.trials)
            jobs = [(k, s) for k, s in enumerate(seeds)]
            if pool is None:
                results = [_run_trial(config, tau_w, k, s, config.methods) for k, s in jobs]
            else:
                results = list(pool.map(
                    lambda job: _run_trial(config, tau_w, job[0], job[1], config.methods),
                    jobs))
            iters = np.arange(config.iters + 1)
            for method in config.methods:
                records = [res[method] for res in results]
                med_u, med_v = _median_curves(records, config.iters + 1)
                se_u, se_v = se_prediction(config, method, tau_w)
                cells.append(SweepCell(snr_db, tau_w, method, iters, med_u, med_v, se_u, se_v,
                                       records))
            if config.baseline:
                records = [res[BASELINE] for res in results]
                med_u, med_v = _median_curves(records, 1)
                tau_u = prior_moments(config.prior_u)[1]
                tau_v = prior_moments(config.prior_v)[1]
                fu, fv = se_linear_fixed_point(config.beta, tau_u, tau_v, tau_w)
                cells.append(SweepCell(snr_db, tau_w, BASELINE,
                                       np.array([config.baseline_iters]), med_u, med_v,
                                       np.array([fu]), np.array([fv]), records))
    finally:
        if pool is not None:
            pool.shutdown()
    return SweepResult(config, cells)


@dataclass
class Comparison:
    deviations: dict
    tolerance: float

    @property
    def max_deviation(self) -> float:
        vals = list(self.deviations.values())
        return max(vals) if vals else 0.0

    @property
    def passed(self) -> bool:
        return all(np.isfinite(d) and d <= self.tolerance for d in self.deviations.values())

    def failures(self) -> dict:
        return {k: d for k, d in self.deviations.items()
                if not (np.isfinite(d) and d <= self.tolerance)}


def compare_to_se(sweep: SweepResult, tolerance: float = 0.05, methods=None,
                  per_iteration: bool = False) -> Comparison:
    """``|median rho_v - SE rho_v|`` per cell (at the final iteration, or the
    worst over iterations with ``per_iteration=True``), keyed by ``(snr_db, method)``."""
    devs = {}
    for c in sweep.cells:
        if methods is not None and c.method not in methods:
            continue
        diff = np.abs(c.median_rho_v - c.se_rho_v)
        d = float(np.max(diff)) if per_iteration else float(diff[-1])
        devs[(c.snr_db, c.method)] = d if np.isfinite(d) else np.inf
    return Comparison(devs, tolerance)


def finite_size_scaling(config: ExperimentConfig, factor: int = 2, methods=None):
    """Deviation from SE at ``(m, n)`` and ``(factor m, factor n)``.

    Returns ``(small, large)`` :class:`Comparison` objects over the same grid.
    """
    big = ExperimentConfig(**{**config.__dict__, "m": factor * config.m,
                              "n": factor * config.n})
    return (compare_to_se(run_sweep(config), methods=methods),
            compare_to_se(run_sweep(big), methods=methods))
