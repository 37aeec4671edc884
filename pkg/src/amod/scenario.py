"""Scenario definitions and the shipped six-zone synthetic city.

The default city is a strip of six rectangular zones, numbered north to
south.  Zones 4 to 6 form the busy core.  Demand is synthetic: a daily
profile with a morning peak heading into the core and a heavier evening peak
heading out of it.  :func:`build_default_files` regenerates the shipped files;
:func:`load_default` reads them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .config import BehaviorParams, DemandProfile, NetworkConfig, dump_config, load_config
from .microsim import ZoneGeometry

DATA_VERSION = "v1"
CONFIG_FILE = f"city6_config_{DATA_VERSION}.json"
DEMAND_FILE = f"city6_demand_{DATA_VERSION}.csv"
GEOMETRY_FILE = f"city6_geometry_{DATA_VERSION}.json"
CORE_ZONES = (3, 4, 5)  # zero-based


@dataclass(frozen=True)
class SurgeSpec:
    zone: int            # zero-based origin zone
    start: float         # minutes from the start of the day
    duration: float = 30.0
    multiplier: float = 3.0

    def __post_init__(self):
        if self.multiplier <= 0:
            raise ValueError("surge multiplier must be positive")
        if self.duration <= 0:
            raise ValueError("surge duration must be positive")


def inject_surge(profile: DemandProfile, spec: SurgeSpec | None) -> DemandProfile:
    """Scale demand leaving ``spec.zone`` inside the surge window; everything else is untouched."""
    if spec is None:
        return profile
    if spec.start < 0 or spec.start + spec.duration > profile.duration + 1e-9:
        raise ValueError("surge window must lie inside the demand profile")
    rates = np.array(profile.rates)
    w = profile.bucket_width
    first = int(round(spec.start / w))
    last = int(np.ceil((spec.start + spec.duration) / w - 1e-9))
    if abs(first * w - spec.start) > 1e-9 or abs(last * w - (spec.start + spec.duration)) > 1e-9:
        raise ValueError("surge window must align with demand buckets")
    rates[first:last, spec.zone, :] *= spec.multiplier
    return replace(profile, rates=rates)


@dataclass(frozen=True)
class Scenario:
    profile: DemandProfile
    surge: SurgeSpec | None = None
    seeds: tuple = (0,)
    start: float = 0.0        # minutes after midnight
    duration: float = 1440.0  # operation horizon in minutes
    surge_hidden: bool = True
    initial_idle: float | None = None  # idle vehicles per zone at the start; default spreads half the fleet

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("operation horizon must be positive")
        if self.surge is not None:
            if not (self.start <= self.surge.start
                    and self.surge.start + self.surge.duration <= self.start + self.duration + 1e-9):
                raise ValueError("surge window must lie within the operation horizon")

    def true_profile(self) -> DemandProfile:
        return inject_surge(self.profile, self.surge)

    def forecast(self, t: float, n_periods: int, period: float) -> np.ndarray:
        """Demand the controller believes in at time ``t`` for the next ``n_periods``.

        A hidden surge stays invisible until it has started.
        """
        true = self.true_profile()
        if self.surge is None or not self.surge_hidden or t >= self.surge.start - 1e-9:
            return true.window(t, n_periods, period)
        return self.profile.window(t, n_periods, period)


# ---------------------------------------------------------------------------
# synthetic city

def default_geometry() -> ZoneGeometry:
    return ZoneGeometry.strip()


def _bump(h, centre, width):
    d = (h - centre + 12.0) % 24.0 - 12.0
    return np.exp(-0.5 * (d / width) ** 2)


def synthetic_rates(travel_time: np.ndarray, bucket: float = 5.0, daily_base: float = 1.0) -> np.ndarray:
    """Base OD rates ``(buckets, K, K)`` per minute for one day.

    ``daily_base`` scales the whole profile.  The mixture uses three OD
    patterns: an all-day gravity pattern, a morning pattern drawn into the
    core and an evening pattern flowing out of it.
    """
    K = travel_time.shape[0]
    core = np.zeros(K)
    core[list(CORE_ZONES)] = 1.0
    decay = np.exp(-travel_time / 18.0)
    w_core = 1.0 + 0.5 * core
    base = w_core[:, None] * w_core[None, :] * decay
    morning = np.ones(K)[:, None] * (1.0 + 3.0 * core)[None, :] * decay
    evening = (1.0 + 2.0 * core)[:, None] * (1.0 + 0.6 * (1 - core))[None, :] * decay
    for m in (base, morning, evening):
        m /= m.sum()
    n = int(round(1440.0 / bucket))
    h = (np.arange(n) + 0.5) * bucket / 60.0
    level_base = 0.12 + 0.40 * _bump(h, 13.0, 3.0) + 0.18 * _bump(h, 23.3, 1.6)
    level_morning = 0.75 * _bump(h, 8.6, 1.3)
    level_evening = 1.05 * _bump(h, 19.3, 1.9)
    rates = (level_base[:, None, None] * base + level_morning[:, None, None] * morning
             + level_evening[:, None, None] * evening)
    return daily_base * rates


# fitted with ``amod calibrate --seed 0`` on the shipped city (5-minute cancellation
# windows, 30-minute completion windows)
CALIBRATED_CANCEL = (12.56, 0.405, -0.885)
CALIBRATED_COMPLETION = 0.98


def default_behavior(geometry: ZoneGeometry, cancel_coeffs=CALIBRATED_CANCEL,
                     completion_scale: float = CALIBRATED_COMPLETION) -> BehaviorParams:
    K = geometry.zone_count
    return BehaviorParams(sensitivity=0.05, value_of_time=0.5, cancel_coeffs=cancel_coeffs,
                          pickup_scale=geometry.pickup_scale(), pickup_exponent=np.full(K, 0.5),
                          completion_scale=completion_scale)


def default_network(geometry: ZoneGeometry, fleet_size: float = 3000.0,
                    parking_cap: float = 1000.0) -> NetworkConfig:
    K = geometry.zone_count
    tau = np.round(geometry.travel_time(), 4)
    return NetworkConfig(travel_time=tau, fleet_size=fleet_size, parking_cap=np.full(K, parking_cap),
                         op_cost_per_hour=10.0, price_cap=2.5, idle_floor=15.0,
                         control_period=5.0, step_seconds=20.0)


DEFAULT_DEMAND_SCALE = 620.0


def build_default_files(directory, cancel_coeffs=CALIBRATED_CANCEL,
                        completion_scale: float = CALIBRATED_COMPLETION,
                        demand_scale: float = DEFAULT_DEMAND_SCALE) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    geo = default_geometry()
    net = default_network(geo)
    beh = default_behavior(geo, cancel_coeffs, completion_scale)
    dump_config(net, beh, directory / CONFIG_FILE)
    rates = np.round(synthetic_rates(net.travel_time, 5.0, demand_scale), 6)
    DemandProfile(rates, 5.0).to_csv(directory / DEMAND_FILE)
    x = [p.bounds for p in geo.polygons]
    with open(directory / GEOMETRY_FILE, "w") as fh:
        json.dump({"zones": [list(b) for b in x], "speed_km_per_min": geo.speed}, fh, indent=2)


def load_geometry(path) -> ZoneGeometry:
    from shapely.geometry import box
    with open(path) as fh:
        doc = json.load(fh)
    if set(doc) != {"zones", "speed_km_per_min"}:
        raise ValueError("geometry file needs exactly 'zones' and 'speed_km_per_min'")
    return ZoneGeometry(tuple(box(*b) for b in doc["zones"]), float(doc["speed_km_per_min"]))


def data_path(name: str) -> Path:
    return Path(str(resources.files("amod") / "data" / name))


@dataclass(frozen=True)
class City:
    network: NetworkConfig
    behavior: BehaviorParams
    profile: DemandProfile
    geometry: ZoneGeometry


def load_default() -> City:
    net, beh = load_config(data_path(CONFIG_FILE))
    profile = DemandProfile.from_csv(data_path(DEMAND_FILE), zone_count=net.zone_count, bucket_width=5.0)
    return City(net, beh, profile, load_geometry(data_path(GEOMETRY_FILE)))


def load_city(config_path=None, demand_path=None, geometry_path=None) -> City:
    """Default city with any of its three files replaced."""
    net, beh = load_config(config_path or data_path(CONFIG_FILE))
    profile = DemandProfile.from_csv(demand_path or data_path(DEMAND_FILE), zone_count=net.zone_count)
    geo = load_geometry(geometry_path) if geometry_path else (
        load_geometry(data_path(GEOMETRY_FILE)) if net.zone_count == 6 else None)
    return City(net, beh, profile, geo)
