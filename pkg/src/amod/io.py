"""Run directories: CSV and JSON writers for closed-loop runs and experiment tables."""
from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if hasattr(value, "rates") and hasattr(value, "bucket_width"):
        return {"buckets": int(value.rates.shape[0]), "bucket_width": value.bucket_width}
    return value


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(_plain(obj), fh, indent=2, default=str)


def write_rows(rows, path, fields=None) -> None:
    """Write dicts as CSV; nested lists are stored as JSON strings."""
    rows = list(rows)
    if fields is None:
        fields = []
        for r in rows:
            fields += [k for k in r if k not in fields]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: json.dumps(_plain(v)) if isinstance(v, (list, tuple, np.ndarray)) else _plain(v)
                        for k, v in r.items()})


def write_run(record, directory) -> Path:
    """The standard run layout: config.json, metrics.csv, actions.csv, states.csv,
    convergence.csv and events.csv (the last only if events were recorded)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_json({"mpc": record.config, "scenario": {
        "start": record.scenario.start, "duration": record.scenario.duration,
        "surge": record.scenario.surge, "surge_hidden": record.scenario.surge_hidden,
        "initial_idle": record.scenario.initial_idle}, "seed": record.seed,
        "summary": {"profit": record.profit, "revenue": record.revenue, "cost": record.cost,
                    "trips": record.trips, "fallbacks": len(record.incidents),
                    "conservation_error": record.conservation_error}}, d / "config.json")
    write_rows(record.metrics, d / "metrics.csv")
    write_rows(record.actions, d / "actions.csv")
    write_rows(record.states, d / "states.csv")
    write_rows(record.convergence, d / "convergence.csv",
               fields=["time", "iteration", "dual", "primal", "best_dual", "best_primal", "gap",
                       "max_violation", "step"])
    if record.world is not None and record.world.config.record_events:
        record.world.write_events(d / "events.csv")
    if record.incidents:
        write_rows(record.incidents, d / "incidents.csv")
    return d
