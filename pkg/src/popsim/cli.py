"""Command-line front end: ``popsim {run,calibrate,compare,sample} CONFIG [options]``.

Exit codes: 0 success, 1 invalid scenario file or flags, 2 failure while
computing.  Every command writes ``manifest.json`` next to its results.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import platform
import sys
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__, io
from .calibration import TargetTable, calibrate, write_theta
from .config import ConfigError, load_config, resolve
from .domain import EventOrder, State
from .engine import RunPlan, run
from .health.calibration import default_targets, mortality_calibration_problem
from .health.model import STROKE_TERMS, default_theta, health_simulator, write_coefficients
from .health.population import InitConfig, init_population
from .health.study import (BASELINE_COLUMNS, StudyDesign, compare_salt, nonparticipation_coefficients,
                           odds_ratio_fits, odds_ratio_table, run_study, scaled_invitees)
from .sampler import MissingnessMechanism, apply_missingness

log = logging.getLogger("popsim")

EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class UsageError(ValueError):
    pass


# -- setup ---------------------------------------------------------------------

class Context:
    """Validated config plus command-line overrides."""

    def __init__(self, args):
        self.path = Path(args.config)
        self.cfg, self.sha256 = load_config(self.path)
        self.base = self.path.resolve().parent
        self.args = args
        self.seed = self.cfg.seed if args.seed is None else args.seed
        self.size = self.cfg.init.size if args.pop_size is None else args.pop_size
        self.threads = self.cfg.run.threads if args.threads is None else args.threads
        if self.size < 0 or self.threads < 1 or self.seed < 0:
            raise UsageError("--pop-size and --seed must be >= 0, --threads >= 1")
        self.out = Path(args.out if args.out is not None else resolve(self.base, self.cfg.outputs.dir))

    def theta(self) -> dict[str, float]:
        p = self.cfg.parameters
        theta = default_theta(resolve(self.base, p.stroke_male), resolve(self.base, p.stroke_female),
                              resolve(self.base, p.diabetes), resolve(self.base, p.mortality))
        unknown = [k for k in p.overrides if k not in theta]
        if unknown:
            raise ConfigError(f"parameter override(s) {unknown} are not model parameters")
        theta.update(p.overrides)
        return theta

    def init_config(self) -> InitConfig:
        section = self.cfg.init
        changes = {k: v for k, v in section.model_dump().items() if k != "size" and v is not None}
        try:
            return replace(InitConfig(n=self.size), **changes)
        except ValueError as exc:
            raise ConfigError(f"init: {exc}") from None

    def simulator(self, trackers=()):
        ev = self.cfg.events
        return health_simulator(self.seed, trackers, EventOrder(ev.order, shuffle=ev.shuffle), ev.aging)

    def start(self) -> State:
        theta = self.theta()
        return State(init_population(self.init_config(), theta, self.seed), theta)


def _versions() -> dict[str, str]:
    out = {"python": platform.python_version(), "popsim": __version__}
    for pkg in ("numpy", "scipy", "numba", "pydantic", "pyyaml"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def _write_manifest(ctx: Context, command: str, settings: dict, files: list[str]) -> None:
    manifest = {
        "command": command,
        "config": str(ctx.path),
        "config_sha256": ctx.sha256,
        "seed": ctx.seed,
        "settings": settings,
        "outputs": sorted(files),
        "versions": _versions(),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    (ctx.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _check_replay(args, sha256: str) -> None:
    """Take seed and flags from a previous manifest; warn when the config changed since."""
    if args.replay is None:
        return
    try:
        manifest = json.loads(Path(args.replay).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read manifest {args.replay}: {exc}") from None
    if manifest.get("config_sha256") != sha256:
        print(f"warning: {args.config} differs from the configuration recorded in {args.replay} "
              f"(sha256 {manifest.get('config_sha256', '?')[:12]}... vs {sha256[:12]}...); "
              "results will not replay that run", file=sys.stderr)
    settings = manifest.get("settings", {})
    if args.seed is None:
        args.seed = manifest.get("seed")
    for key in ("pop_size", "horizon", "threads"):
        if getattr(args, key, None) is None and key in settings:
            setattr(args, key, settings[key])


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


# -- commands ------------------------------------------------------------------

def cmd_run(ctx: Context) -> list[str]:
    horizon = ctx.cfg.run.horizon if ctx.args.horizon is None else ctx.args.horizon
    if horizon < 0:
        raise UsageError("--horizon must be >= 0")
    trackers = ctx.cfg.outputs.trackers
    sim = ctx.simulator(trackers)
    start = ctx.start()
    plan = RunPlan(horizon, ctx.cfg.run.snapshot, partitions=ctx.threads, threads=ctx.threads)
    record = run(sim, start, plan)
    files = ["population.csv", "trackers.csv"]
    pop = record.final.population
    io.write_population_csv(ctx.out / "population.csv", pop)
    if ctx.cfg.outputs.binary:
        io.write_population_binary(ctx.out / "population.psim", pop)
        files.append("population.psim")
    _write_rows(ctx.out / "trackers.csv", ["t", *trackers],
                ([t + 1, *(record.trackers[k][t] for k in trackers)] for t in range(horizon)))
    for t, state in record.snapshots:
        if t != horizon:
            name = f"snapshot_{t:06d}.csv"
            io.write_population_csv(ctx.out / name, state.population)
            files.append(name)
    ctx.settings = {"pop_size": ctx.size, "horizon": horizon, "threads": ctx.threads}
    return files


def cmd_calibrate(ctx: Context) -> list[str]:
    c = ctx.cfg.calibration
    target_path = ctx.args.target or resolve(ctx.base, c.targets)
    targets = TargetTable.from_csv(target_path) if target_path else default_targets()
    max_evals = c.max_evals if ctx.args.max_evals is None else ctx.args.max_evals
    horizon = c.horizon if ctx.args.horizon is None else ctx.args.horizon
    if max_evals < 1 or horizon < 1:
        raise UsageError("--max-evals and --horizon must be >= 1")
    problem = mortality_calibration_problem(ctx.simulator(), ctx.start(), targets, horizon, c.free, max_evals,
                                            c.tol, partitions=ctx.threads)
    result = calibrate(problem)
    write_theta(ctx.out / "theta.csv", {k: result.theta[k] for k in c.free})
    write_coefficients(ctx.out / "mortality.csv",
                       {k: result.theta[k] for k in ("alpha0", "alpha1", "alpha2", "alpha3",
                                                     "weibull_shape", "weibull_scale")})
    result.write_trace(ctx.out / "trace.csv")
    _write_rows(ctx.out / "fit.csv", ["objective", "initial_objective", "evaluations", "converged"],
                [[result.fun, result.trace[0][2], len(result.trace), int(result.converged)]])
    ctx.settings = {"pop_size": ctx.size, "horizon": horizon, "threads": ctx.threads, "max_evals": max_evals,
                    "targets": str(target_path) if target_path else "default"}
    return ["theta.csv", "mortality.csv", "trace.csv", "fit.csv"]


def cmd_compare(ctx: Context) -> list[str]:
    s = ctx.cfg.interventions
    names = tuple(ctx.args.scenarios.split(",")) if ctx.args.scenarios else s.scenarios
    reps = s.replications if ctx.args.replications is None else ctx.args.replications
    horizon = s.horizon if ctx.args.horizon is None else ctx.args.horizon
    if reps < 1 or horizon < 0:
        raise UsageError("--replications must be >= 1 and --horizon >= 0")
    try:
        counts = compare_salt(ctx.simulator(), ctx.start(), horizon, reps, names, partitions=ctx.threads)
    except ValueError as exc:
        if "unknown scenario" in str(exc):
            raise UsageError(str(exc)) from None
        raise
    header = ["replication", "seed", *(n for n, _ in counts)]
    _write_rows(ctx.out / "compare_counts.csv", header,
                ([r, ctx.seed + r, *(int(c[r]) for _, c in counts)] for r in range(reps)))
    rows = []
    for name, c in counts:
        q = np.quantile(c, [0.0, 0.25, 0.5, 0.75, 1.0])
        rows.append([name, float(c.mean()), float(c.std(ddof=1)) if reps > 1 else 0.0, *map(float, q)])
    _write_rows(ctx.out / "compare_summary.csv", ["scenario", "mean", "sd", "min", "q25", "median", "q75", "max"],
                rows)
    ctx.settings = {"pop_size": ctx.size, "horizon": horizon, "threads": ctx.threads, "replications": reps,
                    "scenarios": list(names)}
    return ["compare_counts.csv", "compare_summary.csv"]


def cmd_sample(ctx: Context) -> list[str]:
    s = ctx.cfg.sampling
    if ctx.args.design not in (None, "sampling"):
        raise UsageError(f"unknown design section {ctx.args.design!r}; this file defines 'sampling'")
    horizon = s.horizon if ctx.args.horizon is None else ctx.args.horizon
    if s.nonparticipation == "none":
        coefs = {}
    else:
        coefs = nonparticipation_coefficients(resolve(ctx.base, s.nonparticipation))
    invitees = scaled_invitees(ctx.size) if s.invitees is None else s.invitees
    start = ctx.start()
    design = StudyDesign(invitees, horizon, coefs, s.exclude_prior_stroke)
    result = run_study(ctx.simulator(), start, design, partitions=ctx.threads)
    sample = result.sample
    if s.item_missingness is not None and s.item_missingness.columns:
        m = s.item_missingness
        mech = MissingnessMechanism(m.kind, m.prob, m.intercept, m.coefficients, "cells", "item-missingness")
        sample = apply_missingness(sample, mech, m.columns, ctx.simulator().psi)
        result.sample = sample
    files = ["sample.csv", "design.csv", "incidence.csv"]
    io.write_sample_csv(ctx.out / "sample.csv", sample)
    io.write_design_csv(ctx.out / "design.csv", sample)
    if ctx.cfg.outputs.binary:
        io.write_sample_binary(ctx.out / "sample.psms", sample)
        files.append("sample.psms")
    _write_rows(ctx.out / "incidence.csv",
                ["group", "incidence_per_100k_py", "individuals"],
                [["population", result.population_incidence, int((start.population["stroke"] == 0).sum())],
                 ["participants", result.sample_incidence, result.participants],
                 ["invitees", result.invited_incidence, sample.n]])
    if s.fit_models and result.participants:
        theta = start.theta
        for sex, label, prefix in ((0, "men", "stroke_m"), (1, "women", "stroke_f")):
            try:
                fits = odds_ratio_fits(result, sex)
            except ValueError as exc:
                log.warning("odds-ratio models for %s not fitted: %s", label, exc)
                continue
            table = odds_ratio_table(fits, {k: theta[f"{prefix}_{k}"] for k in STROKE_TERMS})
            header = list(table[0])
            _write_rows(ctx.out / f"odds_ratios_{label}.csv", header, ([row[k] for k in header] for row in table))
            files.append(f"odds_ratios_{label}.csv")
    ctx.settings = {"pop_size": ctx.size, "horizon": horizon, "threads": ctx.threads, "invitees": invitees,
                    "baseline_columns": list(BASELINE_COLUMNS)}
    return files


COMMANDS = {"run": cmd_run, "calibrate": cmd_calibrate, "compare": cmd_compare, "sample": cmd_sample}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="popsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="scenario YAML file")
        p.add_argument("--seed", type=int)
        p.add_argument("--pop-size", type=int)
        p.add_argument("--threads", type=int, help="worker threads; also the number of partitions")
        p.add_argument("--out", help="output directory (default: outputs.dir of the config)")
        p.add_argument("--replay", help="manifest.json of an earlier run whose seed and flags to reuse")
        p.add_argument("--horizon", type=int)
        return p

    common(sub.add_parser("run", help="simulate and write the final population and trackers"))
    p = common(sub.add_parser("calibrate", help="fit background and stroke mortality to targets"))
    p.add_argument("--target", help="target table CSV (key,value,weight)")
    p.add_argument("--max-evals", type=int)
    p = common(sub.add_parser("compare", help="salt scenarios with shared random numbers"))
    p.add_argument("--scenarios", help="comma-separated list, e.g. baseline,industry,advice")
    p.add_argument("--replications", type=int)
    p = common(sub.add_parser("sample", help="follow-up study with selective non-participation"))
    p.add_argument("--design", help="config section holding the design (default: sampling)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _, sha = load_config(args.config)
        _check_replay(args, sha)
        ctx = Context(args)
        ctx.theta()
        ctx.init_config()
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        ctx.out.mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.command](ctx)
        _write_manifest(ctx, args.command, ctx.settings, files)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything raised while simulating
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
