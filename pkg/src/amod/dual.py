"""Dual decomposition of the relaxed problem across zones.

The fleet-size constraint is the only coupling between zones.  Pricing it
with one nonnegative multiplier per control period splits the relaxed problem
into independent zone subproblems (solved by :mod:`amod.zone_dp`).  A
projected subgradient loop moves the multipliers; each iterate's plans are
projected onto the fleet constraint to obtain a feasible relaxed plan.

The fleet constraint is enforced on the period average of the on-duty count,
which is the quantity the multipliers price.

Dual values are estimated per zone as the best of the grid solution, its
greedy rollout and every feasible zone plan seen so far (``candidates``).  The
value of a fixed plan is affine in the multipliers, so keeping candidates makes
the estimate monotone in what has been learned and guarantees that the bound
never drops below a plan it has already evaluated.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .config import BehaviorParams, NetworkConfig
from .core import SystemState
from .relaxed import RelaxedState, relax_state
from .zone_dp import ActionGrid, ZoneProblem, evaluate_zone_plan, rollout_policy, solve_subproblem

log = logging.getLogger(__name__)

PROJECTION_PASSES = 25


class FleetInfeasibleError(ValueError):
    """Occupied vehicles alone exceed the fleet; no idle reduction can restore feasibility."""

    def __init__(self, stage: int, deficit: float, reducible: float):
        self.stage, self.deficit, self.reducible = stage, deficit, reducible
        super().__init__(f"stage {stage}: fleet deficit {deficit:.3f} exceeds reducible idle stock "
                         f"{reducible:.3f}")


@dataclass
class MultiplierTrajectory:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, float).copy()
        if self.values.ndim != 1:
            raise ValueError("one multiplier per stage")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ValueError("multipliers must be finite and nonnegative")

    def shifted(self, fill: float | None = None) -> "MultiplierTrajectory":
        """Drop the first stage and repeat the last one (warm start for the next control step)."""
        v = self.values
        if v.size == 0:
            return MultiplierTrajectory(v)
        tail = v[-1] if fill is None else fill
        return MultiplierTrajectory(np.append(v[1:], tail))


def update_multipliers(lam, violation, step: float) -> np.ndarray:
    """Projected subgradient step ``max(0, lam + step * violation)``."""
    if step <= 0:
        raise ValueError("step size must be positive")
    return np.maximum(0.0, np.asarray(lam, float) + step * np.asarray(violation, float))


def project_fleet(idle, occupied, fleet_size: float, idle_floor: float, stage: int = 0) -> np.ndarray:
    """Cut idle levels so that idle plus occupied vehicles fit in the fleet.

    ``idle`` and ``occupied`` are per-zone vectors for one stage or ``(H, K)``
    arrays.  The deficit is shared in proportion to each zone's idle level;
    zones pushed below the floor are clamped and the remainder is shared again
    among the zones still above it.
    """
    idle = np.asarray(idle, float)
    occupied = np.asarray(occupied, float)
    if idle.ndim == 2:
        return np.stack([project_fleet(idle[t], occupied[t], fleet_size, idle_floor, t)
                         for t in range(idle.shape[0])])
    if np.any(idle < idle_floor - 1e-9):
        raise ValueError("idle levels must start at or above the floor")
    out = idle.copy()
    deficit = float(out.sum() + occupied.sum() - fleet_size)
    if deficit <= 0:
        return out
    reducible = float((out - idle_floor).sum())
    if reducible < deficit - 1e-9:
        raise FleetInfeasibleError(stage, deficit, reducible)
    active = out > idle_floor
    while deficit > 1e-12 and active.any():
        share = deficit * out[active] / out[active].sum()
        trial = out[active] - share
        low = trial < idle_floor
        idx = np.flatnonzero(active)
        if not low.any():
            out[idx] = trial
            break
        deficit = float((idle_floor - trial[low]).sum())
        out[idx] = np.maximum(trial, idle_floor)
        active[idx[low]] = False
    return out


@dataclass
class DualConfig:
    gap_tol: float = 1e-2
    max_iters: int = 500
    step: float = 1e-5
    decay: float = 0.99
    initial_multiplier: float = 0.05
    grid_points: int = 15
    price_levels: int = 20
    idle_levels: int = 15


@dataclass
class ZoneCandidate:
    """Revenue and on-duty vehicle-minutes per stage of one feasible zone plan."""

    revenue: np.ndarray
    on_duty: np.ndarray

    def value(self, lam, cost: float) -> float:
        return float(self.revenue.sum() - ((cost + np.asarray(lam)) * self.on_duty).sum())


@dataclass
class DualResult:
    upper_bound: float
    primal_value: float
    gap_log: list
    converged: bool
    iterations: int
    multipliers: MultiplierTrajectory
    plan_prices: np.ndarray   # (H, K) projected plan
    plan_idle: np.ndarray     # (H, K)
    best_multipliers: MultiplierTrajectory = None

    @property
    def gap(self) -> float:
        return relative_gap(self.upper_bound, self.primal_value)


def relative_gap(upper: float, lower: float) -> float:
    if not np.isfinite(lower):
        return np.inf
    if upper == lower:
        return 0.0
    return (upper - lower) / max(abs(lower), 1.0)


@dataclass
class IterationOutcome:
    dual_value: float
    zone_values: np.ndarray
    prices: np.ndarray        # (H, K) unprojected greedy plans
    idle: np.ndarray
    on_duty: np.ndarray       # (H, K) vehicle-minutes
    violation: np.ndarray     # (H,) average on-duty count minus fleet size


class DualDecomposition:
    """Zone subproblems of one horizon plus the coordinator state shared across iterations."""

    def __init__(self, network: NetworkConfig, behavior: BehaviorParams, demand, state,
                 config: DualConfig | None = None):
        self.network, self.behavior = network, behavior
        self.config = config or DualConfig()
        self.demand = np.asarray(demand, float)
        self.H, K = self.demand.shape[0], network.zone_count
        self.K = K
        rs = relax_state(state) if isinstance(state, SystemState) else state
        if not isinstance(rs, RelaxedState):
            raise TypeError("state must be a SystemState or RelaxedState")
        self.initial = rs.stacked()
        c = self.config
        actions = ActionGrid.default(network, c.price_levels, c.idle_levels)
        self.problems = [ZoneProblem(network, behavior, self.demand, i, self.initial[i], actions=actions,
                                     points=c.grid_points) for i in range(K)]
        self.candidates: list[list[ZoneCandidate]] = [[] for _ in range(K)]
        self.cost = network.cost_per_minute
        self.period = network.control_period

    # -- pieces --------------------------------------------------------------
    def add_candidate(self, zone: int, revenue, on_duty) -> None:
        self.candidates[zone].append(ZoneCandidate(np.asarray(revenue, float).copy(),
                                                   np.asarray(on_duty, float).copy()))

    def add_plan(self, prices, idle) -> float:
        """Register a feasible plan (per stage ``(H, K)`` or per step ``(H, n, K)``); returns its value."""
        total = 0.0
        for i, prob in enumerate(self.problems):
            r = evaluate_zone_plan(prob, self.initial[i], np.asarray(prices)[..., i], np.asarray(idle)[..., i])
            self.add_candidate(i, r.revenue, r.on_duty)
            total += r.value
        return total

    def dual_iteration(self, lam) -> IterationOutcome:
        lam = np.asarray(lam, float)
        H, K = self.H, self.K
        values = np.zeros(K)
        prices, idle, on = np.zeros((H, K)), np.zeros((H, K)), np.zeros((H, K))
        for i, prob in enumerate(self.problems):
            policy, v = solve_subproblem(prob, lam, self.initial[i])
            ro = rollout_policy(policy, self.initial[i])
            best = max(v, ro.value)
            for cand in self.candidates[i]:
                best = max(best, cand.value(lam, self.cost))
            values[i] = best
            prices[:, i], idle[:, i], on[:, i] = ro.prices, ro.idle, ro.on_duty
        dual = float(values.sum() + (lam * self.network.fleet_size * self.period).sum())
        violation = on.sum(1) / self.period - self.network.fleet_size
        return IterationOutcome(dual, values, prices, idle, on, violation)

    def _simulate(self, prices, idle):
        revs, ons = np.zeros((self.H, self.K)), np.zeros((self.H, self.K))
        for i, prob in enumerate(self.problems):
            r = evaluate_zone_plan(prob, self.initial[i], prices[:, i], idle[:, i])
            revs[:, i], ons[:, i] = r.revenue, r.on_duty
        return revs, ons

    def project(self, prices, idle):
        """Stage-by-stage projection with re-simulation; returns ``(idle, revenue, on_duty)``."""
        idle = np.array(idle, float)
        N, lb, T = self.network.fleet_size, self.network.idle_floor, self.period
        revs, ons = self._simulate(prices, idle)
        for t in range(self.H):
            for _ in range(PROJECTION_PASSES):
                occupied = ons[t] / T - idle[t]
                if idle[t].sum() + occupied.sum() <= N + 1e-9:
                    break
                idle[t] = project_fleet(idle[t], np.maximum(occupied, 0.0), N, lb, t)
                revs, ons = self._simulate(prices, idle)
            else:
                raise FleetInfeasibleError(t, float(ons[t].sum() / T - N), 0.0)
        return idle, revs, ons

    # -- loop ----------------------------------------------------------------
    def run(self, lam0=None, stop_gap: bool = True) -> DualResult:
        c = self.config
        H = self.H
        lam = np.full(H, c.initial_multiplier) if lam0 is None else np.maximum(np.asarray(lam0, float), 0.0)
        if lam.shape != (H,):
            raise ValueError(f"need {H} initial multipliers")
        best_dual, best_primal = np.inf, -np.inf
        best_lam = lam.copy()
        plan_p = np.zeros((H, self.K))
        plan_v = np.full((H, self.K), self.network.idle_floor)
        rows = []
        step = c.step
        converged = False
        it = 0
        for it in range(1, c.max_iters + 1):
            out = self.dual_iteration(lam)
            primal = -np.inf
            zone_values = out.zone_values.copy()
            try:
                proj_idle, revs, ons = self.project(out.prices, out.idle)
            except FleetInfeasibleError as err:
                log.info("projection failed at iteration %d: %s", it, err)
            else:
                primal = float(revs.sum() - self.cost * ons.sum())
                for i in range(self.K):
                    self.add_candidate(i, revs[:, i], ons[:, i])
                    zone_values[i] = max(zone_values[i], self.candidates[i][-1].value(lam, self.cost))
                if primal > best_primal:
                    best_primal, plan_p, plan_v = primal, out.prices.copy(), proj_idle
            dual = float(zone_values.sum() + (lam * self.network.fleet_size * self.period).sum())
            if dual < best_dual:
                best_dual, best_lam = dual, lam.copy()
            gap = relative_gap(best_dual, best_primal)
            rows.append({"iteration": it, "dual": dual, "primal": primal, "best_dual": best_dual,
                         "best_primal": best_primal, "gap": gap,
                         "max_violation": float(out.violation.max()), "step": step})
            if stop_gap and gap <= c.gap_tol:
                converged = True
                break
            lam = update_multipliers(lam, out.violation, step)
            step *= c.decay
        return DualResult(best_dual, best_primal, rows, converged, it, MultiplierTrajectory(lam),
                          plan_p, plan_v, MultiplierTrajectory(best_lam))


def dual_iteration(decomposition: DualDecomposition, lam) -> IterationOutcome:
    return decomposition.dual_iteration(lam)


def run_algorithm1(network: NetworkConfig, behavior: BehaviorParams, demand, state,
                   config: DualConfig | None = None, lam0=None, plans=()) -> DualResult:
    """Solve the relaxed problem by dual decomposition from ``state``.

    ``plans`` are extra feasible plans, each a ``(prices, idle)`` pair in the
    shapes accepted by :meth:`DualDecomposition.add_plan`, that the bound must
    dominate.
    """
    dd = DualDecomposition(network, behavior, demand, state, config)
    for prices, idle in plans:
        dd.add_plan(prices, idle)
    return dd.run(lam0)


def write_convergence_csv(rows, path, extra: dict | None = None) -> None:
    """One line per iteration; ``extra`` columns (e.g. the control step) are prepended."""
    extra = extra or {}
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        fields = list(extra) + ["iteration", "dual", "primal", "best_dual", "best_primal", "gap",
                                "max_violation", "step"]
        w = csv.DictWriter(fh, fieldnames=fields)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({**extra, **r})

