"""Command-line entry point: ``amod <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .calibration import calibrate_from_logs, collect_logs
from .mpc import (InvariantBreach, MpcConfig, bound_report, compare_strategies, horizon_sweep, run_mpc,
                  surge_experiment)
from .scenario import Scenario, SurgeSpec, load_city

EXIT_BREACH = 3

log = logging.getLogger("amod")


def _clock(text: str) -> float:
    """Minutes after midnight from ``HH:MM`` or a plain number of minutes."""
    if ":" in text:
        h, m = text.split(":")
        return 60.0 * int(h) + float(m)
    return float(text)


def _common(p: argparse.ArgumentParser, solver=True):
    p.add_argument("--config", help="network and behaviour JSON (default: shipped city)")
    p.add_argument("--demand", help="demand CSV (default: shipped city)")
    p.add_argument("--geometry", help="zone geometry JSON (default: shipped city)")
    p.add_argument("--start", default="0:00", help="start time, HH:MM or minutes (default 0:00)")
    p.add_argument("--duration-min", type=float, default=1440.0, help="operation horizon in minutes")
    p.add_argument("--mode", choices=["joint", "pricing-only"], default="joint")
    if solver:
        p.add_argument("--solver", choices=["nlp", "dual-dp", "concave"], default="nlp")
    p.add_argument("--horizon-min", type=float, default=30.0, help="prediction horizon in minutes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")


def _setup(args):
    city = load_city(args.config, args.demand, args.geometry)
    config = MpcConfig(horizon=args.horizon_min, period=city.network.control_period,
                       mode=args.mode.replace("-", "_"),
                       solver=getattr(args, "solver", "nlp").replace("-", "_"))
    return city, config


def _scenario(args, city, surge=None, hidden=True) -> Scenario:
    return Scenario(city.profile, surge=surge, seeds=(args.seed,), start=_clock(args.start),
                    duration=args.duration_min, surge_hidden=hidden)


def _seeds(args):
    return tuple(range(args.seed, args.seed + args.seeds))


def cmd_simulate(args) -> int:
    city, config = _setup(args)
    rec = run_mpc(city, _scenario(args, city), config, args.seed)
    d = io.write_run(rec, args.out)
    print(f"profit {rec.profit:.2f} trips {rec.trips} fallbacks {len(rec.incidents)} -> {d}")
    return 0


def cmd_bound(args) -> int:
    city, config = _setup(args)
    rep = bound_report(city, _scenario(args, city), config, args.seed, every=args.every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_rows(rep["rows"], out / "bounds.csv")
    io.write_rows(rep["convergence"], out / "convergence.csv")
    io.write_run(rep["record"], out / "run")
    summary = {k: rep[k] for k in ("violations", "mean_dual_gap", "mean_concave_gap")}
    io.write_json(summary, out / "summary.json")
    print(f"ordering violations {summary['violations']}, mean gaps: decomposition "
          f"{summary['mean_dual_gap']:.4f}, concave {summary['mean_concave_gap']:.4f}")
    return 0


def _comparison_rows(cmp):
    return [{k: v for k, v in r.items() if k != "runs"} for r in cmp["rows"]]


def cmd_compare(args) -> int:
    city, config = _setup(args)
    cmp = compare_strategies(city, _scenario(args, city), config, _seeds(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_rows(_comparison_rows(cmp), out / "compare.csv")
    io.write_json({k: cmp[k] for k in ("profit_gap_pct", "trips_gap_pct", "pooled_profit_gap_pct")},
                  out / "summary.json")
    print(f"joint vs pricing-only: profit gap {cmp['profit_gap_pct']:.2f}%, trips gap {cmp['trips_gap_pct']:.2f}%")
    return 0


def cmd_surge(args) -> int:
    city, config = _setup(args)
    at = _clock(args.at)
    spec = SurgeSpec(args.zone - 1, at, args.surge_min, args.multiplier)
    if args.start == "0:00" and args.duration_min == 1440.0:
        args.start, args.duration_min = str(at - args.before_min), args.before_min + args.after_min
    scen = _scenario(args, city, spec, hidden=not args.known)
    cmp = surge_experiment(city, scen, config, _seeds(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in cmp["rows"]:
        row = {k: v for k, v in r.items() if k not in ("runs",) and not k.startswith("shock_")}
        for m in ("joint", "pricing_only"):
            for k, v in r[f"shock_{m}"].items():
                row[f"{m}_{k}"] = v
        rows.append(row)
    io.write_rows(rows, out / "surge.csv")
    series = []
    for r in cmp["rows"]:
        for m, rec in r["runs"].items():
            for t, v, w in zip(rec.times, rec.pickup_series(spec.zone), rec.pickup_series(spec.zone, "wait")):
                series.append({"seed": r["seed"], "mode": m, "time": t, "pickup_min": v, "wait_min": w})
    io.write_rows(series, out / "pickup_series.csv")
    io.write_json({k: cmp[k] for k in ("profit_gap_pct", "trips_gap_pct", "pooled_profit_gap_pct")},
                  out / "summary.json")
    print(f"surge in zone {args.zone} at {args.at}: joint vs pricing-only profit gap {cmp['profit_gap_pct']:.2f}%")
    return 0


def cmd_sweep(args) -> int:
    city, config = _setup(args)
    rows = horizon_sweep(city, _scenario(args, city), tuple(args.horizons), config, _seeds(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_rows(rows, out / "sweep.csv")
    for r in rows:
        print(f"T_p {r['horizon']:.0f} min: mean profit {r['mean_profit']:.2f} (se {r['std_error']:.2f})")
    return 0


def cmd_calibrate(args) -> int:
    city = load_city(args.config, args.demand, args.geometry)
    logs = collect_logs(city.network, city.behavior, city.geometry, city.profile, args.seed,
                        _clock(args.start), args.duration_min)
    cancel, done = calibrate_from_logs(logs, city.network.dt, city.network.travel_time)
    hv = done.details["high_volume"]
    corr = done.details["correlation"][hv]
    result = {"cancellation": {"coefficients": cancel.coefficients, "r2": cancel.r2, "rmse": cancel.rmse,
                               "samples": cancel.n},
              "completion": {"kappa": float(done.coefficients[0]), "r2": done.r2, "rmse": done.rmse,
                             "samples": done.n, "per_pair": done.details["per_pair"],
                             "min_high_volume_correlation": float(np.nanmin(corr)) if corr.size else None}}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(result, out / "calibration.json")
    c0, c1, c2 = cancel.coefficients
    print(f"cancellation c = ({c0:.4f}, {c1:.4f}, {c2:.4f}), R2 {cancel.r2:.3f}; "
          f"completion kappa {done.coefficients[0]:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="amod", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="one closed-loop run")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bound", help="achieved profit against both upper bounds at every step")
    _common(p, solver=False)
    p.add_argument("--every", type=int, default=1, help="bound every k-th control step")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("compare", help="joint against pricing-only on identical seeds")
    _common(p, solver=True)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds from --seed")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("surge", help="demand surge: profit gap and pickup-time shock")
    _common(p)
    p.add_argument("--zone", type=int, default=4, help="surged origin zone, 1-based")
    p.add_argument("--at", default="21:00", help="surge onset, HH:MM or minutes")
    p.add_argument("--surge-min", type=float, default=30.0)
    p.add_argument("--multiplier", type=float, default=3.0)
    p.add_argument("--known", action="store_true", help="let the forecaster see the surge in advance")
    p.add_argument("--before-min", type=float, default=60.0, help="run length before the onset")
    p.add_argument("--after-min", type=float, default=120.0, help="run length after the onset")
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(func=cmd_surge)

    p = sub.add_parser("sweep-horizon", help="profit against prediction horizon")
    _common(p)
    p.add_argument("--horizons", type=float, nargs="+", default=[10.0, 20.0, 30.0, 60.0])
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="fit cancellation and completion models on simulator logs")
    p.add_argument("--config")
    p.add_argument("--demand")
    p.add_argument("--geometry")
    p.add_argument("--start", default="0:00")
    p.add_argument("--duration-min", type=float, default=1440.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvariantBreach as err:
        print(f"invariant breach: {err}", file=sys.stderr)
        return EXIT_BREACH


if __name__ == "__main__":
    sys.exit(main())
