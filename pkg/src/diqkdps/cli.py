"""Command-line front end: rate, scan, curve, selftest.

Exit codes: 0 success, 1 configuration error, 2 solver failure,
3 selftest failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import npa, optimize, report, selftest
from .config import ConfigError, RunConfig, load_config
from .entropy import PostSelectionPolicy, default_relaxation, key_rate
from .model import DetectorParams, MeasurementConfig, StateParams

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_SELFTEST = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diqkdps",
        description="Key rates for device-independent QKD with random "
                    "post-selection of detector outcomes")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, baseline=False):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="CSV output path")
        p.add_argument("--level", choices=["1", "2", "3", "4", "2ab"],
                       help="relaxation level override")
        p.add_argument("--budget", type=int, help="rate evaluations per point")
        p.add_argument("--seed", type=int, help="restart sampling seed")
        p.add_argument("--parallel", type=int, help="worker processes")
        if baseline:
            p.add_argument("--baseline", action="store_true",
                           help="reference CHSH analysis instead of the "
                                "post-selection protocol")
            p.add_argument("--no-plot", action="store_true",
                           help="skip the figure next to the CSV")

    add_common(sub.add_parser("rate", help="evaluate one configured point"))
    add_common(sub.add_parser("scan", help="bisect the threshold efficiency"),
               baseline=True)
    add_common(sub.add_parser("curve", help="optimized rate over an efficiency grid"),
               baseline=True)

    st = sub.add_parser("selftest", help="run the fast invariant suite")
    st.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    updates = {}
    for name in ("level", "budget", "seed", "parallel"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if updates.get("budget", 1) <= 0:
        raise ConfigError("--budget must be positive")
    if updates.get("parallel", 1) < 1:
        raise ConfigError("--parallel must be at least 1")
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _protocol_objects(cfg: RunConfig):
    sp = StateParams(theta=cfg.theta, visibility=cfg.visibility,
                     mean_photon_pairs=cfg.mean_photon_pairs)
    mc = MeasurementConfig(cfg.angles_alice, cfg.angles_bob,
                           key_x=cfg.key_x, key_y=cfg.key_y)
    det = DetectorParams(eta=cfg.eta, dark=cfg.dark)
    return sp, mc, det


def _budget(cfg: RunConfig) -> optimize.OptimizationBudget:
    return optimize.OptimizationBudget(max_evals=cfg.budget,
                                       restarts=cfg.restarts,
                                       rate_tol=cfg.rate_tol, seed=cfg.seed)


def _progress(event: optimize.SearchEvent) -> None:
    rate = "-" if event.rate is None else f"{event.rate:.6g}"
    msg = f" {event.message}" if event.message else ""
    print(f"# {event.kind} eta={event.eta:.4f} rate={rate} "
          f"evals={event.n_evals}{msg}", file=sys.stderr)


def cmd_rate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    sp, mc, det = _protocol_objects(cfg)
    level, extended = npa.parse_level(cfg.level)
    point = key_rate(sp, mc, det, PostSelectionPolicy(cfg.p),
                     relaxation=default_relaxation(level, extended),
                     tol=cfg.tol)
    print(report.rate_point_text(point))
    if args.out:
        report.write_csv([point], args.out)
    return EXIT_OK if point.solved else EXIT_SOLVER


def cmd_scan(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    result = optimize.threshold_scan(
        (cfg.scan.eta_min, cfg.scan.eta_max), dark=cfg.dark,
        visibility=cfg.visibility, budget=_budget(cfg),
        bracket=cfg.scan.bracket, level=cfg.level, baseline=args.baseline,
        parallel=cfg.parallel, on_event=_progress)
    print(report.threshold_text(result))
    if args.out:
        report.write_csv(result.probes, args.out)
        if not args.no_plot:
            report.render_scan_figure(result, report.figure_path_for(args.out))
    return EXIT_OK


def cmd_curve(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if not cfg.eta_grid:
        raise ConfigError("curve requires a curve.eta_grid list in the config")
    points = optimize.curve(cfg.eta_grid, dark=cfg.dark,
                            visibility=cfg.visibility, budget=_budget(cfg),
                            level=cfg.level, baseline=args.baseline,
                            parallel=cfg.parallel, on_event=_progress)
    if args.out:
        report.write_csv(points, args.out)
        if not args.no_plot:
            label = "reference CHSH rate" if args.baseline else "optimized rate"
            report.render_curve_figure(points, report.figure_path_for(args.out),
                                       label=label)
    else:
        sys.stdout.write(report.csv_text(points))
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = selftest.run_selftest(inject_fault=args.inject_fault)
    failed = [r for r in results if not r.ok]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"in {total:.1f}s")
    return EXIT_SELFTEST if failed else EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {"rate": cmd_rate, "scan": cmd_scan, "curve": cmd_curve,
               "selftest": cmd_selftest}[args.command]
    try:
        return handler(args)
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (npa.SolverError, optimize.OptimizationFailedError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
