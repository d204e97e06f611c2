"""Command-line interface: ``run``, ``se-predict``, ``threshold`` and ``selfcheck``.

Experiment files are INI documents::

    [problem]
    m = 1000
    n = 500

    [priors]
    u = gaussian(mean=0, variance=1)
    v = bernoulli_exponential(sparsity=0.1, rate=1)

    [rules]
    methods = linear, mmse
    cost_u = l1(weight=0.1)         ; prox rules only
    init = prior_mean
    channel = empirical

    [sweep]
    snr_db = -5:1:15                ; or a list, or tau_w = 0.5, 0.1, 0
    trials = 50
    iters = 10
    master_seed = 2024
    baseline = true

    [output]
    dir = results

Exit codes: 0 success, 1 selfcheck failure, 2 configuration error,
3 degraded sweep (more than 10% failed trials in some cell).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import re
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .model import BernoulliExponential, Gaussian, PointMass, prior_moments
from .montecarlo import (METHODS, ExperimentConfig, SweepResult, initial_rho_v, rules_for,
                         run_sweep)
from .selection import ScalarCost
from .state_evolution import phase_transition_threshold, se_trajectory

EXIT_OK, EXIT_SELFCHECK, EXIT_CONFIG, EXIT_DEGRADED = 0, 1, 2, 3

SWEEP_COLUMNS = ("snr_db", "method", "iter", "median_rho_u", "median_rho_v", "se_rho_u",
                 "se_rho_v", "trials_ok", "trials_failed")
SE_COLUMNS = ("snr_db", "iter", "rho_u", "rho_v", "alpha_u0", "alpha_u1", "alpha_v0",
              "alpha_v1", "lambda_u", "lambda_v")

SCHEMA = {
    "problem": {"m", "n"},
    "priors": {"u", "v"},
    "rules": {"methods", "cost_u", "cost_v", "init", "channel"},
    "sweep": {"snr_db", "tau_w", "trials", "iters", "master_seed", "baseline",
              "baseline_iters", "threads"},
    "output": {"dir"},
}
REQUIRED = {("problem", "m"), ("problem", "n"), ("priors", "u"), ("priors", "v"),
            ("sweep", "master_seed")}

PRIORS = {"gaussian": (Gaussian, ("mean", "variance")),
          "bernoulli_exponential": (BernoulliExponential, ("sparsity", "rate")),
          "point_mass": (PointMass, ("value",))}
PRIOR_NAMES = {Gaussian: "gaussian", BernoulliExponential: "bernoulli_exponential",
               PointMass: "point_mass"}


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class CliConfig:
    experiment: ExperimentConfig
    out_dir: Optional[str] = None


# ---------------------------------------------------------------------------
# Parsing and serialisation
# ---------------------------------------------------------------------------

_CALL = re.compile(r"^\s*([a-z_0-9]+)\s*(?:\((.*)\))?\s*$")


def _parse_call(text: str, line):
    match = _CALL.match(text)
    if not match:
        raise ConfigError(f"cannot parse {text!r}; expected name(key=value, ...)", line)
    name, args = match.group(1), match.group(2)
    kwargs = {}
    if args and args.strip():
        for part in args.split(","):
            if "=" not in part:
                raise ConfigError(f"argument {part.strip()!r} is not key=value", line)
            key, value = (s.strip() for s in part.split("=", 1))
            try:
                kwargs[key] = float(value)
            except ValueError:
                raise ConfigError(f"argument {key} has non-numeric value {value!r}",
                                  line) from None
    return name, kwargs


def parse_prior(text: str, line=None):
    name, kwargs = _parse_call(text, line)
    if name not in PRIORS:
        raise ConfigError(f"unknown prior {name!r}; expected one of {sorted(PRIORS)}", line)
    cls, allowed = PRIORS[name]
    extra = set(kwargs) - set(allowed)
    if extra:
        raise ConfigError(f"unknown argument(s) {sorted(extra)} for prior {name}", line)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid prior {text!r}: {exc}", line) from None


def parse_cost(text: str, line=None) -> ScalarCost:
    name, kwargs = _parse_call(text, line)
    extra = set(kwargs) - {"weight"}
    if extra:
        raise ConfigError(f"unknown argument(s) {sorted(extra)} for cost {name}", line)
    try:
        return ScalarCost(name, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid cost {text!r}: {exc}", line) from None


def _fmt_float(x: float) -> str:
    return repr(float(x))


def format_prior(prior) -> str:
    name = PRIOR_NAMES[type(prior)]
    fields = PRIORS[name][1]
    args = ", ".join(f"{f}={_fmt_float(getattr(prior, f))}" for f in fields)
    return f"{name}({args})"


def format_cost(cost: ScalarCost) -> str:
    return f"{cost.kind}(weight={_fmt_float(cost.weight)})"


def parse_grid(text: str, line=None) -> tuple:
    """``start:step:stop`` (inclusive) or a comma-separated list."""
    text = text.strip()
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) != 3:
                raise ValueError
            start, step, stop = parts
            if step <= 0:
                raise ConfigError("range step must be positive", line)
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            if count < 1:
                raise ConfigError("range is empty", line)
            return tuple(float(np.round(start + k * step, 12)) for k in range(count))
        return tuple(float(p) for p in text.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse grid {text!r}", line) from None


def _line_numbers(text: str) -> dict:
    """Map ``(section, key)`` and ``(section, None)`` to 1-based line numbers."""
    where, section = {}, None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            where.setdefault((section, None), i)
        elif section is not None and ("=" in line or ":" in line) and not raw[0].isspace():
            key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
            where.setdefault((section, key), i)
    return where


def _int(value: str, line, name) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {value!r}", line) from None


def _bool(value: str, line, name) -> bool:
    low = value.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{name} must be a boolean, got {value!r}", line)


def parse_config(text: str) -> CliConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"),
                                       default_section="__no_defaults__")
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any section", exc.lineno) from None
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as exc:
        raise ConfigError(exc.message.split(":", 1)[-1].strip(), exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0]
        bad = text.splitlines()[lineno - 1].strip()
        raise ConfigError(f"malformed line {bad!r}", lineno) from None
    lines = _line_numbers(text)

    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", lines.get((section, None)))
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]",
                                  lines.get((section, key)))
    for section, key in sorted(REQUIRED):
        if not parser.has_option(section, key):
            raise ConfigError(f"missing required key {key!r} in [{section}]",
                              lines.get((section, None)))

    def get(section, key, default=None):
        if parser.has_option(section, key):
            return parser.get(section, key), lines.get((section, key))
        return default, lines.get((section, None))

    kw = {}
    for key in ("m", "n"):
        value, ln = get("problem", key)
        kw[key] = _int(value, ln, key)
    for side in ("u", "v"):
        value, ln = get("priors", side)
        kw[f"prior_{side}"] = parse_prior(value, ln)

    value, ln = get("rules", "methods", "linear, mmse")
    methods = tuple(m.strip() for m in value.split(",") if m.strip())
    for meth in methods:
        if meth not in METHODS:
            raise ConfigError(f"unknown method {meth!r}; expected one of {METHODS}", ln)
    kw["methods"] = methods
    for side in ("u", "v"):
        value, ln = get("rules", f"cost_{side}")
        if value is not None:
            kw[f"cost_{side}"] = parse_cost(value, ln)
    if "prox" in methods and ("cost_u" not in kw or "cost_v" not in kw):
        raise ConfigError("prox method needs cost_u and cost_v", get("rules", "methods")[1])
    for key in ("init", "channel"):
        value, _ = get("rules", key)
        if value is not None:
            kw[key] = value.strip()

    snr, ln_snr = get("sweep", "snr_db")
    tau, ln_tau = get("sweep", "tau_w")
    if (snr is None) == (tau is None):
        raise ConfigError("[sweep] needs exactly one of snr_db and tau_w",
                          ln_tau if snr is not None else lines.get(("sweep", None)))
    if snr is not None:
        kw["snr_grid_db"] = parse_grid(snr, ln_snr)
    else:
        kw["tau_w_grid"] = parse_grid(tau, ln_tau)
    for key in ("trials", "iters", "master_seed", "baseline_iters", "threads"):
        value, ln = get("sweep", key)
        if value is not None:
            kw[key] = _int(value, ln, key)
    value, ln = get("sweep", "baseline")
    if value is not None:
        kw["baseline"] = _bool(value, ln, "baseline")

    try:
        experiment = ExperimentConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out_dir, _ = get("output", "dir")
    return CliConfig(experiment, out_dir.strip() if out_dir else None)


def dump_config(config: CliConfig) -> str:
    e = config.experiment
    out = ["[problem]", f"m = {e.m}", f"n = {e.n}", "", "[priors]",
           f"u = {format_prior(e.prior_u)}", f"v = {format_prior(e.prior_v)}", "",
           "[rules]", f"methods = {', '.join(e.methods)}"]
    if e.cost_u is not None:
        out.append(f"cost_u = {format_cost(e.cost_u)}")
    if e.cost_v is not None:
        out.append(f"cost_v = {format_cost(e.cost_v)}")
    out += [f"init = {e.init}", f"channel = {e.channel}", "", "[sweep]"]
    if e.snr_grid_db is not None:
        out.append("snr_db = " + ", ".join(_fmt_float(s) for s in e.snr_grid_db))
    else:
        out.append("tau_w = " + ", ".join(_fmt_float(s) for s in e.tau_w_grid))
    out += [f"trials = {e.trials}", f"iters = {e.iters}", f"master_seed = {e.master_seed}",
            f"baseline = {str(e.baseline).lower()}", f"baseline_iters = {e.baseline_iters}",
            f"threads = {e.threads}"]
    if config.out_dir is not None:
        out += ["", "[output]", f"dir = {config.out_dir}"]
    return "\n".join(out) + "\n"


def load_config(path) -> CliConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def fmt(x) -> str:
    """Fixed 12-significant-digit positional decimal; empty for non-finite values."""
    x = float(x)
    if not math.isfinite(x):
        return ""
    # round in scientific notation first so a carry (9.99.. -> 10.0) moves the exponent
    mantissa, exponent = f"{x:.11e}".split("e")
    return f"{float(mantissa + 'e' + exponent):.{max(11 - int(exponent), 0)}f}"


def write_sweep(result: SweepResult, out_dir: Path):
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for c in result.cells:
            for k, it in enumerate(c.iterations):
                w.writerow([fmt(c.snr_db), c.method, int(it), fmt(c.median_rho_u[k]),
                            fmt(c.median_rho_v[k]), fmt(c.se_rho_u[k]), fmt(c.se_rho_v[k]),
                            c.trials_ok, c.trials_failed])
    with open(out_dir / "trials.jsonl", "w") as fh:
        for c in result.cells:
            for r in c.records:
                rec = {"snr_db": fmt(c.snr_db), "method": c.method, "trial": r.trial,
                       "seed": r.seed, "rho_u": [fmt(x) for x in r.rho_u],
                       "rho_v": [fmt(x) for x in r.rho_v], "status": r.status}
                if r.message:
                    rec["message"] = r.message
                fh.write(json.dumps(rec) + "\n")


def se_rows(experiment: ExperimentConfig, method: str):
    """SE trajectories for every grid point as rows of :data:`SE_COLUMNS`."""
    rule_u, rule_v = rules_for(experiment, method)
    rows = []
    for snr_db, tau_w in experiment.noise_points():
        if experiment.init == "prior_mean":
            states = se_trajectory(rule_u, rule_v, experiment.prior_u, experiment.prior_v,
                                   experiment.beta, tau_w, experiment.iters)
        else:
            states = se_trajectory(rule_u, rule_v, experiment.prior_u, experiment.prior_v,
                                   experiment.beta, tau_w, experiment.iters,
                                   init="correlated", eps=initial_rho_v(experiment),
                                   second_moment=1.0)
        for s in states:
            rows.append((snr_db, s.t, s.rho_u, s.rho_v, s.alpha_u0, s.alpha_u1, s.alpha_v0,
                         s.alpha_v1, s.lambda_u, s.lambda_v))
    return rows


def write_se(experiment: ExperimentConfig, out_dir: Path):
    """``se.csv`` for the first method; ``se_<method>.csv`` for every method."""
    for i, method in enumerate(experiment.methods):
        rows = se_rows(experiment, method)
        names = [f"se_{method}.csv"] + (["se.csv"] if i == 0 else [])
        for name in names:
            with open(out_dir / name, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(SE_COLUMNS)
                for row in rows:
                    w.writerow([fmt(row[0]), int(row[1])] + [fmt(x) for x in row[2:]])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _log(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


def _setup(args):
    if args.config is None:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    if args.threads is not None:
        if args.threads < 0:
            raise ConfigError("--threads must be >= 0")
        cfg.experiment.threads = args.threads
    out = args.out or cfg.out_dir or "."
    out_dir = Path(out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from None
    return cfg, out_dir


def cmd_run(args) -> int:
    cfg, out_dir = _setup(args)
    t0 = time.perf_counter()
    result = run_sweep(cfg.experiment)
    write_sweep(result, out_dir)
    _log(args, f"wrote {out_dir / 'sweep.csv'} and {out_dir / 'trials.jsonl'} "
               f"({len(result.cells)} cells, {time.perf_counter() - t0:.1f} s)")
    if result.degraded:
        bad = [(c.snr_db, c.method) for c in result.cells if c.degraded]
        print(f"degraded cells (more than 10% failed trials): {bad}", file=sys.stderr)
        return EXIT_DEGRADED
    return EXIT_OK


def cmd_se_predict(args) -> int:
    cfg, out_dir = _setup(args)
    write_se(cfg.experiment, out_dir)
    _log(args, f"wrote SE predictions to {out_dir}")
    return EXIT_OK


def cmd_threshold(args) -> int:
    if args.config is not None:
        e = load_config(args.config).experiment
        beta, tau_u, tau_v = e.beta, prior_moments(e.prior_u)[1], prior_moments(e.prior_v)[1]
    else:
        if None in (args.beta, args.tau_u, args.tau_v):
            raise ConfigError("threshold needs --beta, --tau-u and --tau-v (or --config)")
        beta, tau_u, tau_v = args.beta, args.tau_u, args.tau_v
    if not (beta > 0 and tau_u > 0 and tau_v > 0):
        raise ConfigError("beta, tau_u and tau_v must be positive")
    tau_star = phase_transition_threshold(beta, tau_u, tau_v)
    snr_star = 10 * math.log10(tau_u * tau_v / tau_star)
    print(f"tau_w* = {fmt(tau_star)}")
    print(f"SNR* = {fmt(snr_star)} dB")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_checks

    t0 = time.perf_counter()
    results = run_checks()
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in "
          f"{time.perf_counter() - t0:.1f} s")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_SELFCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--threads", type=int, metavar="N", help="worker threads, 0 = auto")
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="iterfac",
                                     description="Rank-one IterFac experiments and SE.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="Monte Carlo sweep").set_defaults(
        func=cmd_run)
    sub.add_parser("se-predict", parents=[common], help="SE predictions only").set_defaults(
        func=cmd_se_predict)
    th = sub.add_parser("threshold", parents=[common], help="zero-initialisation threshold")
    th.add_argument("--beta", type=float)
    th.add_argument("--tau-u", type=float)
    th.add_argument("--tau-v", type=float)
    th.set_defaults(func=cmd_threshold)
    sub.add_parser("selfcheck", parents=[common], help="fast property suite").set_defaults(
        func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
