"""Network, behaviour and demand inputs, plus their file formats.

Configuration is a single JSON document with two sections::

    {
      "network": {
        "travel_time": [[...], ...],     # minutes, K x K, diagonal included
        "fleet_size": 3000,
        "op_cost_per_hour": 10.0,
        "price_cap": 2.5,                # currency per minute of trip time
        "idle_floor": 15,
        "parking_cap": [...],            # K values, or a list of K-vectors (one per control period)
        "control_period_min": 5.0,
        "step_seconds": 20.0
      },
      "behavior": {
        "sensitivity": 0.05,
        "value_of_time": 0.5,
        "cancel_coeffs": [c0, c1, c2],
        "pickup_scale": [...],           # K values
        "pickup_exponent": [...],        # K values
        "completion_scale": 1.0
      }
    }

Unknown keys are rejected.  Demand profiles are CSV files with the header
``bucket_start_min,origin,destination,rate_per_min``; zone labels in files
are 1-based.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration input."""


def _as_array(value, name, ndim=None) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ConfigError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name}: non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NetworkConfig:
    travel_time: np.ndarray
    fleet_size: float
    parking_cap: np.ndarray
    op_cost_per_hour: float = 10.0
    price_cap: float = 2.5
    idle_floor: float = 15.0
    control_period: float = 5.0
    step_seconds: float = 20.0

    def __post_init__(self):
        tau = _as_array(self.travel_time, "travel_time", 2)
        if tau.shape[0] != tau.shape[1]:
            raise ConfigError("travel_time must be square")
        if np.any(tau <= 0):
            raise ConfigError("travel_time entries must be positive (diagonal included)")
        object.__setattr__(self, "travel_time", tau)
        cap = _as_array(self.parking_cap, "parking_cap")
        if cap.ndim == 1:
            cap = cap[None, :]
        if cap.ndim != 2 or cap.shape[1] != tau.shape[0]:
            raise ConfigError(f"parking_cap must have {tau.shape[0]} columns")
        if np.any(cap < 0):
            raise ConfigError("parking_cap must be nonnegative")
        cap.setflags(write=False)
        object.__setattr__(self, "parking_cap", cap)
        K = tau.shape[0]
        if self.fleet_size <= K * self.idle_floor:
            raise ConfigError("fleet_size must exceed zone_count * idle_floor")
        if self.price_cap <= 0:
            raise ConfigError("price_cap must be positive")
        if self.idle_floor < 0 or self.op_cost_per_hour < 0:
            raise ConfigError("idle_floor and op_cost_per_hour must be nonnegative")
        if self.control_period <= 0 or self.step_seconds <= 0:
            raise ConfigError("control_period and step_seconds must be positive")
        if self.step_seconds > self.control_period * 60.0:
            raise ConfigError("step_seconds cannot exceed the control period")
        ratio = self.control_period * 60.0 / self.step_seconds
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("control period must be a whole number of integration steps")

    @property
    def zone_count(self) -> int:
        return self.travel_time.shape[0]

    @property
    def dt(self) -> float:
        """Integration step in minutes."""
        return self.step_seconds / 60.0

    @property
    def steps_per_period(self) -> int:
        return int(round(self.control_period * 60.0 / self.step_seconds))

    @property
    def cost_per_minute(self) -> float:
        return self.op_cost_per_hour / 60.0

    @property
    def min_outbound_time(self) -> np.ndarray:
        """Shortest trip time to any other zone; degenerate rows fall back to the row max."""
        tau = self.travel_time
        K = tau.shape[0]
        if K == 1:
            return tau.max(axis=1)
        off = np.where(np.eye(K, dtype=bool), np.inf, tau)
        return off.min(axis=1)

    def parking_cap_at(self, t: float) -> np.ndarray:
        idx = int(np.floor(t / self.control_period + 1e-9)) % self.parking_cap.shape[0]
        return self.parking_cap[idx]

    def to_dict(self) -> dict:
        cap = self.parking_cap
        return {
            "travel_time": self.travel_time.tolist(),
            "fleet_size": float(self.fleet_size),
            "op_cost_per_hour": float(self.op_cost_per_hour),
            "price_cap": float(self.price_cap),
            "idle_floor": float(self.idle_floor),
            "parking_cap": (cap[0] if cap.shape[0] == 1 else cap).tolist(),
            "control_period_min": float(self.control_period),
            "step_seconds": float(self.step_seconds),
        }


@dataclass(frozen=True)
class BehaviorParams:
    sensitivity: float
    value_of_time: float
    cancel_coeffs: tuple
    pickup_scale: np.ndarray
    pickup_exponent: np.ndarray
    completion_scale: float = 1.0

    def __post_init__(self):
        c = tuple(float(x) for x in self.cancel_coeffs)
        if len(c) != 3:
            raise ConfigError("cancel_coeffs needs three entries (c0, c1, c2)")
        object.__setattr__(self, "cancel_coeffs", c)
        beta = _as_array(self.pickup_scale, "pickup_scale", 1)
        theta = _as_array(self.pickup_exponent, "pickup_exponent", 1)
        object.__setattr__(self, "pickup_scale", beta)
        object.__setattr__(self, "pickup_exponent", theta)
        if self.sensitivity <= 0:
            raise ConfigError("sensitivity must be positive")
        if self.value_of_time < 0:
            raise ConfigError("value_of_time must be nonnegative")
        if c[1] <= 0 or c[2] >= 0:
            raise ConfigError("cancel_coeffs need c1 > 0 and c2 < 0")
        if np.any(beta <= 0) or np.any(theta <= 0):
            raise ConfigError("pickup_scale and pickup_exponent must be positive")
        if beta.shape != theta.shape:
            raise ConfigError("pickup_scale and pickup_exponent lengths differ")
        if self.completion_scale <= 0:
            raise ConfigError("completion_scale must be positive")

    def to_dict(self) -> dict:
        return {
            "sensitivity": float(self.sensitivity),
            "value_of_time": float(self.value_of_time),
            "cancel_coeffs": list(self.cancel_coeffs),
            "pickup_scale": self.pickup_scale.tolist(),
            "pickup_exponent": self.pickup_exponent.tolist(),
            "completion_scale": float(self.completion_scale),
        }


_NETWORK_KEYS = {
    "travel_time": True, "fleet_size": True, "parking_cap": True,
    "op_cost_per_hour": False, "price_cap": False, "idle_floor": False,
    "control_period_min": False, "step_seconds": False,
}
_BEHAVIOR_KEYS = {
    "sensitivity": True, "value_of_time": True, "cancel_coeffs": True,
    "pickup_scale": True, "pickup_exponent": True, "completion_scale": False,
}


def _check_keys(section: dict, spec: dict, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(section) - set(spec)
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")
    missing = [k for k, req in spec.items() if req and k not in section]
    if missing:
        raise ConfigError(f"{where}: missing fields {missing}")


def parse_config(doc: dict) -> tuple[NetworkConfig, BehaviorParams]:
    _check_keys(doc, {"network": True, "behavior": True}, "config")
    net, beh = doc["network"], doc["behavior"]
    _check_keys(net, _NETWORK_KEYS, "network")
    _check_keys(beh, _BEHAVIOR_KEYS, "behavior")
    kwargs = {k: net[k] for k in ("travel_time", "fleet_size", "parking_cap",
                                  "op_cost_per_hour", "price_cap", "idle_floor", "step_seconds")
              if k in net}
    if "control_period_min" in net:
        kwargs["control_period"] = net["control_period_min"]
    network = NetworkConfig(**kwargs)
    behavior = BehaviorParams(**beh)
    if behavior.pickup_scale.shape[0] != network.zone_count:
        raise ConfigError("pickup parameters must have one entry per zone")
    return network, behavior


def load_config(path) -> tuple[NetworkConfig, BehaviorParams]:
    with open(path) as fh:
        return parse_config(json.load(fh))


def dump_config(network: NetworkConfig, behavior: BehaviorParams, path) -> None:
    with open(path, "w") as fh:
        json.dump({"network": network.to_dict(), "behavior": behavior.to_dict()}, fh, indent=2)


@dataclass(frozen=True)
class DemandProfile:
    """Base OD demand as a step function; ``rates[b, i, j]`` holds requests per minute."""

    rates: np.ndarray
    bucket_width: float = 5.0
    periodic: bool = True

    def __post_init__(self):
        rates = _as_array(self.rates, "rates", 3)
        if rates.shape[1] != rates.shape[2]:
            raise ConfigError("demand rates must be (buckets, K, K)")
        if np.any(rates < 0):
            raise ConfigError("demand rates must be nonnegative")
        if self.bucket_width <= 0:
            raise ConfigError("bucket_width must be positive")
        object.__setattr__(self, "rates", rates)

    @property
    def zone_count(self) -> int:
        return self.rates.shape[1]

    @property
    def duration(self) -> float:
        return self.rates.shape[0] * self.bucket_width

    def bucket_index(self, t: float) -> int:
        b = int(np.floor(t / self.bucket_width + 1e-9))
        n = self.rates.shape[0]
        if self.periodic:
            return b % n
        if b < 0 or b >= n:
            raise ConfigError(f"time {t} outside demand coverage [0, {self.duration})")
        return b

    def rate_at(self, t: float) -> np.ndarray:
        return self.rates[self.bucket_index(t)]

    def window(self, t0: float, n_periods: int, period: float | None = None) -> np.ndarray:
        """Rates for ``n_periods`` consecutive periods starting at ``t0``."""
        period = self.bucket_width if period is None else period
        return np.stack([self.rate_at(t0 + k * period) for k in range(n_periods)])

    def scaled(self, factor: float) -> "DemandProfile":
        return replace(self, rates=self.rates * factor)

    def to_csv(self, path) -> None:
        B, K, _ = self.rates.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bucket_start_min", "origin", "destination", "rate_per_min"])
            for b in range(B):
                for i in range(K):
                    for j in range(K):
                        w.writerow([f"{b * self.bucket_width:g}", i + 1, j + 1,
                                    repr(float(self.rates[b, i, j]))])

    @classmethod
    def from_csv(cls, path, zone_count: int | None = None, bucket_width: float | None = None):
        header = ["bucket_start_min", "origin", "destination", "rate_per_min"]
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            first = next(reader, None)
            if first is None or [h.strip() for h in first] != header:
                raise ConfigError(f"demand CSV header must be {','.join(header)}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 4:
                    raise ConfigError(f"line {lineno}: expected 4 columns")
                try:
                    rows.append((float(row[0]), int(row[1]), int(row[2]), float(row[3])))
                except ValueError as exc:
                    raise ConfigError(f"line {lineno}: {exc}") from None
        if not rows:
            raise ConfigError("demand CSV has no rows")
        starts = np.array(sorted({r[0] for r in rows}))
        if bucket_width is None:
            bucket_width = float(np.min(np.diff(starts))) if len(starts) > 1 else 5.0
        K = zone_count or max(max(r[1], r[2]) for r in rows)
        n_buckets = int(round(starts.max() / bucket_width)) + 1
        rates = np.zeros((n_buckets, K, K))
        for t, i, j, v in rows:
            b = t / bucket_width
            if abs(b - round(b)) > 1e-6:
                raise ConfigError(f"bucket start {t} not aligned to width {bucket_width}")
            if not (1 <= i <= K and 1 <= j <= K):
                raise ConfigError(f"zone label out of range: {i}->{j}")
            rates[int(round(b)), i - 1, j - 1] = v
        return cls(rates=rates, bucket_width=bucket_width)
