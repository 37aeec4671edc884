"""Least-squares fits of the cancellation and trip-completion models.

Both fits work on aggregated samples.  :func:`collect_logs` produces them
from the microscopic simulator under randomised controls so that queues and
idle stocks vary enough for the regressions to be identified.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import BehaviorParams, DemandProfile, NetworkConfig
from .core import ControlAction, SystemState
from .microsim import SimConfig, World, ZoneGeometry

log = logging.getLogger(__name__)


class InsufficientVariationError(ValueError):
    """The regression design is rank deficient."""


@dataclass
class FitResult:
    coefficients: np.ndarray
    r2: float
    rmse: float
    n: int
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coefficients = np.atleast_1d(np.asarray(self.coefficients, float))
        if self.n <= self.coefficients.size:
            raise InsufficientVariationError(
                f"{self.n} samples cannot identify {self.coefficients.size} coefficients")


def _r2(y, fitted):
    ss_res = float(((y - fitted) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)


def calibrate_cancellation(waiting, idle, cancel_rate, interior_only: bool = True) -> FitResult:
    """Fit ``cancel_rate ~ c0 + c1*waiting + c2*idle`` by ordinary least squares.

    With ``interior_only`` the samples sitting on either clamp (no cancellations,
    or the whole queue cancelling) are dropped first.
    """
    Q = np.asarray(waiting, float).ravel()
    V = np.asarray(idle, float).ravel()
    y = np.asarray(cancel_rate, float).ravel()
    if not (Q.shape == V.shape == y.shape):
        raise ValueError("sample arrays must have the same length")
    if interior_only:
        keep = (y > 0) & (y < Q)
        Q, V, y = Q[keep], V[keep], y[keep]
    X = np.column_stack([np.ones_like(Q), Q, V])
    if Q.size <= 3 or np.linalg.matrix_rank(X) < 3:
        raise InsufficientVariationError("cancellation samples do not vary enough in queue and idle stock")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    fitted = X @ coef
    return FitResult(coef, _r2(y, fitted), float(np.sqrt(np.mean((y - fitted) ** 2))), int(y.size))


def calibrate_completion(occupied, completion_rate, travel_time, min_volume: float = 0.0) -> FitResult:
    """Zero-intercept regression of completions on in-vehicle counts, per OD pair.

    ``occupied`` and ``completion_rate`` are ``(samples, K, K)``.  The slope of
    pair ``(i, j)`` times its travel time estimates the completion scale; the
    pooled estimate regresses ``rate * tau`` on ``occupied`` over all pairs.
    ``details`` carries per-pair estimates, correlations and the pairs whose mean
    occupancy exceeds ``min_volume``.
    """
    Q = np.asarray(occupied, float)
    y = np.asarray(completion_rate, float)
    tau = np.asarray(travel_time, float)
    if Q.shape != y.shape or Q.ndim != 3 or Q.shape[1:] != tau.shape:
        raise ValueError("occupied and completion_rate must be (samples, K, K) matching travel_time")
    K = tau.shape[0]
    kappa = np.full((K, K), np.nan)
    corr = np.full((K, K), np.nan)
    for i in range(K):
        for j in range(K):
            q, c = Q[:, i, j], y[:, i, j]
            den = float(q @ q)
            if den == 0:
                log.info("no in-vehicle passengers observed on %d->%d; pair skipped", i + 1, j + 1)
                continue
            kappa[i, j] = float(q @ c) / den * tau[i, j]
            if q.std() > 0 and c.std() > 0:
                corr[i, j] = float(np.corrcoef(q, c)[0, 1])
            elif c.std() == 0 and q.std() > 0:
                corr[i, j] = 0.0
    scaled = y * tau
    den = float((Q * Q).sum())
    if den == 0:
        raise InsufficientVariationError("no in-vehicle passengers in the completion samples")
    pooled = float((Q * scaled).sum()) / den
    fitted = pooled * Q
    volume = Q.mean(axis=0)
    high = volume > min_volume
    return FitResult(np.array([pooled]), _r2(scaled.ravel(), fitted.ravel()),
                     float(np.sqrt(np.mean((scaled - fitted) ** 2))), int(Q.size),
                     {"per_pair": kappa, "correlation": corr, "high_volume": high, "mean_occupied": volume})


# ---------------------------------------------------------------------------
# sample collection

@dataclass
class CalibrationLogs:
    """Window-averaged microsim samples.

    ``waiting``, ``idle`` and ``cancel_rate`` are ``(windows, K)``;
    ``occupied`` and ``completion_rate`` are ``(windows, K, K)``.  Rates are per minute.
    """

    waiting: np.ndarray
    idle: np.ndarray
    cancel_rate: np.ndarray
    occupied: np.ndarray
    completion_rate: np.ndarray
    window: float


def aggregate_logs(logs, dt: float, window_steps: int) -> CalibrationLogs:
    """Average per-step :class:`~amod.microsim.StepLog` records over non-overlapping windows."""
    n = len(logs) // window_steps
    if n == 0:
        raise ValueError("not enough steps for one aggregation window")
    use = logs[: n * window_steps]

    def stack(attr):
        a = np.array([getattr(s, attr) for s in use], float)
        return a.reshape(n, window_steps, *a.shape[1:])

    waiting = stack("waiting").mean(1)
    idle = stack("idle").mean(1)
    cancels = stack("cancels").sum(1) / (window_steps * dt)
    occupied = stack("occupied").mean(1)
    done = stack("completions").sum(1) / (window_steps * dt)
    return CalibrationLogs(waiting, idle, cancels, occupied, done, window_steps * dt)


def collect_logs(network: NetworkConfig, behavior: BehaviorParams, geometry: ZoneGeometry,
                 profile: DemandProfile, seed: int = 0, start: float = 0.0, duration: float = 1440.0,
                 price_range=(0.5, 2.5), active_range=(0.5, 1.0)) -> list:
    """Run the simulator under random prices and fleet sizes; returns its per-step logs.

    Every control period draws a price per zone from ``price_range`` and a target
    share of the fleet on duty from ``active_range``.  There is no rebalancing.
    """
    rng = np.random.default_rng(seed + 7919)
    K = network.zone_count
    world = World(network, behavior, geometry, seed=seed,
                  config=SimConfig(step_seconds=network.step_seconds),
                  initial=SystemState.initial(network))
    world.time = start
    n = network.steps_per_period
    periods = int(round(duration / network.control_period))
    for _ in range(periods):
        p = rng.uniform(*price_range, size=K)
        share = rng.uniform(*active_range)
        on = network.fleet_size - world.observe_macro_state().N_p.sum()
        change = (share * network.fleet_size - on) / K / network.control_period
        world.apply_control(ControlAction(p, np.zeros((K, K)), np.full(K, change)))
        for _ in range(n):
            world.step(profile.rate_at(world.time))
    return world.logs


CANCEL_WINDOW = 5.0        # minutes
COMPLETION_WINDOW = 30.0   # long enough to span most trips, so completions do not lag occupancy
HIGH_VOLUME = 40.0         # mean in-vehicle passengers marking a high-volume OD pair


def calibrate_from_logs(logs, dt: float, travel_time, cancel_window: float = CANCEL_WINDOW,
                        completion_window: float = COMPLETION_WINDOW,
                        min_volume: float = HIGH_VOLUME) -> tuple[FitResult, FitResult]:
    """Both fits from raw step logs, each on its own aggregation window."""
    a = aggregate_logs(logs, dt, max(int(round(cancel_window / dt)), 1))
    b = aggregate_logs(logs, dt, max(int(round(completion_window / dt)), 1))
    return (calibrate_cancellation(a.waiting, a.idle, a.cancel_rate),
            calibrate_completion(b.occupied, b.completion_rate, travel_time, min_volume))
