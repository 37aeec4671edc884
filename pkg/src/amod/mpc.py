"""Receding-horizon control of the microscopic simulator, and the experiments built on it.

Every control period the controller observes the aggregate plant state,
plans over the prediction horizon with one of three solvers, and installs the
first action of the plan.  The plant is :class:`~amod.microsim.World`; its
books (fares at match, cost per on-duty vehicle-minute) are the reported
profit.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines.concave import ConcaveConfig, ConcaveInstance, solve_concave
from .baselines.nlp import NlpConfig, NlpInstance, solve_original_nlp
from .core import ControlAction, SystemState
from .dual import DualConfig, DualDecomposition
from .microsim import SimConfig, World
from .scenario import City, Scenario

log = logging.getLogger(__name__)

MODES = ("joint", "pricing_only")
SOLVERS = ("nlp", "dual_dp", "concave")
CONSERVATION_TOL = 1e-9


class InvariantBreach(RuntimeError):
    """A run broke vehicle conservation or the pricing-only audit."""


class PlanFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class MpcConfig:
    horizon: float = 30.0     # prediction horizon, minutes
    period: float = 5.0       # control period, minutes
    mode: str = "joint"
    solver: str = "nlp"
    forecast_noise: float = 0.0   # log-normal sigma applied to forecast rates; 0 means the true profile
    nlp: NlpConfig = field(default_factory=NlpConfig)
    warm_nlp: NlpConfig = field(default_factory=lambda: NlpConfig(penalties=(30.0, 1000.0), maxiter=40))
    dual: DualConfig = field(default_factory=lambda: DualConfig(max_iters=60))
    concave: ConcaveConfig = field(default_factory=lambda: ConcaveConfig(max_outer=8, max_inner=400))
    record_events: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.period <= 0 or self.horizon <= 0:
            raise ValueError("horizon and period must be positive")
        ratio = self.horizon / self.period
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("prediction horizon must be a multiple of the control period")
        if self.forecast_noise < 0:
            raise ValueError("forecast noise must be non-negative")

    @property
    def stages(self) -> int:
        return int(round(self.horizon / self.period))


# ---------------------------------------------------------------------------
# planners

def _shift(plan: list) -> list:
    return list(plan[1:]) + [plan[-1]]


def targets_to_actions(state: SystemState, prices, idle, network, rebalancing: bool) -> list[ControlAction]:
    """Turn per-stage idle targets into moves.

    Surplus idle vehicles are sent to zones short of their target in
    proportion to the shortfall (only with ``rebalancing``); what remains is
    met by activating or parking vehicles, within the parked stock and
    parking capacity.
    """
    prices, idle = np.asarray(prices, float), np.asarray(idle, float)
    K = network.zone_count
    T = network.control_period
    N_v = np.array(state.N_v, float)
    N_p = np.array(state.N_p, float)
    cap = network.parking_cap_at(0.0)
    out = []
    for t in range(prices.shape[0]):
        gap = idle[t] - N_v
        r = np.zeros((K, K))
        if rebalancing:
            surplus, deficit = np.maximum(-gap, 0.0), np.maximum(gap, 0.0)
            move = min(surplus.sum(), deficit.sum())
            if move > 0:
                r = np.outer(surplus / surplus.sum(), deficit / deficit.sum()) * move
                np.fill_diagonal(r, 0.0)
        gap = gap + r.sum(axis=1) - r.sum(axis=0)
        s = np.clip(gap, -(cap - N_p), N_p)
        out.append(ControlAction(prices[t], r / T, s / T))
        N_v = N_v + s - r.sum(axis=1) + r.sum(axis=0)
        N_p = N_p - s
    return out


class Planner:
    """Shared bookkeeping: the last plan (for fallbacks) and solver diagnostics."""

    name = ""

    def __init__(self, network, behavior, config: MpcConfig):
        self.network, self.behavior, self.config = network, behavior, config
        self.previous: list | None = None
        self.last_info: dict = {}

    @property
    def joint(self) -> bool:
        return self.config.mode == "joint"

    def solve(self, state, t, demand) -> list[ControlAction]:
        raise NotImplementedError

    def plan(self, state: SystemState, t: float, demand) -> tuple[list, bool]:
        """Returns ``(plan, fell_back)``."""
        self.last_info = {}
        try:
            plan = self.solve(state, t, demand)
            if not plan or not all(np.all(np.isfinite(a.p)) and np.all(np.isfinite(a.r))
                                   and np.all(np.isfinite(a.s)) for a in plan):
                raise PlanFailure("non-finite plan")
        except (PlanFailure, ValueError, FloatingPointError, np.linalg.LinAlgError) as err:
            log.warning("%s solve failed at t=%.1f: %s; reusing the previous plan", self.name, t, err)
            self.last_info["incident"] = str(err)
            if self.previous is None:
                K = self.network.zone_count
                plan = [ControlAction.idle(K, 0.5 * self.network.price_cap)] * self.config.stages
            else:
                plan = _shift(self.previous)
            self.previous = plan
            return plan, True
        if not self.joint:
            plan = [a.without_rebalancing() for a in plan]
        self.previous = plan
        return plan, False


class NlpPlanner(Planner):
    name = "nlp"

    def solve(self, state, t, demand):
        c = self.config
        inst = NlpInstance(self.network, self.behavior, demand, state, c.mode, t)
        guess = None if self.previous is None else _shift(self.previous)
        res = solve_original_nlp(inst, guess, c.nlp if guess is None else c.warm_nlp)
        if not res.feasible:
            raise PlanFailure(f"plan violates {res.violations[0].constraint}")
        self.last_info = {"result": res, "planned_profit": res.profit, "seconds": res.seconds}
        return res.actions


class DualDpPlanner(Planner):
    name = "dual_dp"

    def __init__(self, network, behavior, config):
        super().__init__(network, behavior, config)
        self.multipliers = None

    def solve(self, state, t, demand):
        t0 = time.perf_counter()
        dd = DualDecomposition(self.network, self.behavior, demand, state, self.config.dual)
        lam0 = None
        if self.multipliers is not None:
            lam0 = np.append(self.multipliers[1:], self.multipliers[-1])
        res = dd.run(lam0)
        if not np.isfinite(res.primal_value):
            raise PlanFailure("no fleet-feasible plan found")
        self.multipliers = res.multipliers.values
        self.last_info = {"result": res, "planned_profit": res.primal_value,
                          "seconds": time.perf_counter() - t0, "convergence": res.gap_log}
        return targets_to_actions(state, res.plan_prices, res.plan_idle, self.network, self.joint)


class ConcavePlanner(Planner):
    name = "concave"

    def __init__(self, network, behavior, config):
        super().__init__(network, behavior, config)
        self.x = None

    def solve(self, state, t, demand):
        t0 = time.perf_counter()
        inst = ConcaveInstance(self.network, self.behavior, demand, state, self.config.concave, t,
                               rebalancing=self.joint)
        x0 = None if self.x is None else shift_concave(inst, self.x)
        res = solve_concave(inst, x0)
        self.x = res.x
        self.last_info = {"result": res, "planned_profit": res.value, "seconds": time.perf_counter() - t0}
        return inst.to_actions(res.x)


def shift_concave(inst: ConcaveInstance, x) -> np.ndarray:
    """Drop the first stage of a concave decision vector and repeat the last."""
    parts, start = [], 0
    for size in (inst.nz, inst.nr, inst.ns):
        block = np.asarray(x[start:start + size]).reshape(inst.H, -1)
        parts.append(np.vstack([block[1:], block[-1:]]).ravel())
        start += size
    return np.concatenate(parts)


PLANNERS = {"nlp": NlpPlanner, "dual_dp": DualDpPlanner, "concave": ConcavePlanner}


# ---------------------------------------------------------------------------
# closed loop

@dataclass
class RunRecord:
    config: MpcConfig
    scenario: Scenario
    seed: int
    revenue: float
    cost: float
    trips: int
    metrics: list          # one dict per control period
    actions: list          # one dict per control period
    states: list           # observed plant state at each period start
    incidents: list
    convergence: list
    conservation_error: float
    world: World = None

    @property
    def profit(self) -> float:
        return self.revenue - self.cost

    def pickup_series(self, zone: int, kind: str = "pickup") -> np.ndarray:
        """Mean pickup time per control period for requests from ``zone`` (NaN when none)."""
        return np.array([m[f"{kind}_z{zone + 1}"] for m in self.metrics])

    def profit_between(self, t0: float, t1: float) -> float:
        """Plant profit over the control periods starting in ``[t0, t1)``."""
        return float(sum(m["profit"] for m in self.metrics if t0 - 1e-9 <= m["time"] < t1 - 1e-9))

    def trips_between(self, t0: float, t1: float) -> int:
        return int(sum(m["trips"] for m in self.metrics if t0 - 1e-9 <= m["time"] < t1 - 1e-9))

    @property
    def times(self) -> np.ndarray:
        return np.array([m["time"] for m in self.metrics])


def _forecast(scenario: Scenario, t: float, config: MpcConfig, rng) -> np.ndarray:
    demand = scenario.forecast(t, config.stages, config.period)
    if config.forecast_noise > 0:
        demand = demand * rng.lognormal(-0.5 * config.forecast_noise ** 2, config.forecast_noise, demand.shape)
    return demand


def _conservation_gap(state: SystemState, fleet: float) -> float:
    return abs(state.fleet_total() - fleet)


def _pickup_means(waits, t0, t1, K):
    out = {}
    sel = [w for w in waits if t0 < w[0] <= t1 + 1e-9]
    for kind, col in (("pickup", 2), ("wait", 3)):
        for z in range(K):
            v = [w[col] for w in sel if w[1] == z]
            out[f"{kind}_z{z + 1}"] = float(np.mean(v)) if v else float("nan")
    return out


def run_mpc(city: City, scenario: Scenario, config: MpcConfig | None = None, seed: int = 0,
            on_step=None, keep_world: bool = True) -> RunRecord:
    """Closed-loop run over ``scenario.duration`` minutes starting at ``scenario.start``.

    ``on_step(t, state, demand, planner)`` is called after every solve, before
    the action is applied.  Raises :class:`InvariantBreach` if vehicles are
    created or lost, or a pricing-only run issues a relocation.
    """
    config = config or MpcConfig()
    net, beh = city.network, city.behavior
    if abs(config.period - net.control_period) > 1e-9:
        raise ValueError("controller period must equal the network control period")
    if config.horizon > scenario.duration + 1e-9:
        raise ValueError("prediction horizon exceeds the operation horizon")
    if city.geometry is None:
        raise ValueError("the plant needs zone geometry")
    K, N = net.zone_count, net.fleet_size
    true = scenario.true_profile()
    idle0 = scenario.initial_idle if scenario.initial_idle is not None else 0.5 * N / K
    world = World(net, beh, city.geometry, seed=seed,
                  config=SimConfig(step_seconds=net.step_seconds, record_events=config.record_events),
                  initial=SystemState.initial(net, idle=idle0))
    world.time = scenario.start
    planner = PLANNERS[config.solver](net, beh, config)
    rng = np.random.default_rng(seed + 104729)
    n = net.steps_per_period
    periods = int(round(scenario.duration / config.period))
    metrics, actions, states, incidents, convergence = [], [], [], [], []
    worst = 0.0
    cumulative = 0.0
    for k in range(periods):
        t = world.time
        state = world.observe_macro_state()
        worst = max(worst, _conservation_gap(state, N))
        demand = _forecast(scenario, t, config, rng)
        plan, fell_back = planner.plan(state, t, demand)
        info = planner.last_info
        res = info.get("result")
        traj = getattr(res, "trajectory", None)
        if traj is not None:
            worst = max(worst, max(_conservation_gap(s, N) for s in traj.states))
        if fell_back:
            incidents.append({"time": t, "solver": config.solver, "message": info.get("incident", "")})
        for row in info.get("convergence", ()):
            convergence.append({"time": t, **row})
        if on_step is not None:
            on_step(t, state, demand, planner)
        action = plan[0]
        if config.mode == "pricing_only" and np.any(np.asarray(action.r) != 0):
            raise InvariantBreach(f"pricing-only run issued a relocation at t={t}")
        world.apply_control(action)
        rev0, cost0, trips0 = world.revenue, world.cost, world.trips
        spawned = cancels = 0.0
        for _ in range(n):
            entry = world.step(true.rate_at(world.time))
            spawned += float(entry.spawned.sum())
            cancels += float(entry.cancels.sum())
            if int(world.vehicle_counts().sum()) != world.N:
                raise InvariantBreach(f"agent count drifted from {world.N} at t={world.time:.3f}")
        profit = (world.revenue - rev0) - (world.cost - cost0)
        cumulative += profit
        row = {"time": t, "revenue": world.revenue - rev0, "cost": world.cost - cost0, "profit": profit,
               "cumulative_profit": cumulative, "trips": world.trips - trips0, "requests": spawned,
               "cancellations": cancels, "fallback": int(fell_back),
               "planned_profit": info.get("planned_profit", float("nan")),
               "solve_seconds": info.get("seconds", float("nan"))}
        row.update({f"idle_z{i + 1}": float(v) for i, v in enumerate(state.N_v)})
        row.update(_pickup_means(world.pickup_waits, t, world.time, K))
        idle_steps = np.array([e.idle for e in world.logs[-n:]])
        est = np.power(np.maximum(idle_steps, 1.0), -beh.pickup_exponent) / beh.pickup_scale
        row.update({f"estimate_z{i + 1}": float(v) for i, v in enumerate(est.mean(axis=0))})
        metrics.append(row)
        actions.append({"time": t, "p": np.asarray(action.p, float).tolist(),
                        "r": np.asarray(action.r, float).tolist(), "s": np.asarray(action.s, float).tolist()})
        states.append({"time": t, **{f: np.asarray(getattr(state, f)).tolist()
                                     for f in ("Q_w", "Q_m", "Q_b", "N_v", "N_r", "N_p")}})
    final = world.observe_macro_state()
    worst = max(worst, _conservation_gap(final, N))
    if worst > CONSERVATION_TOL:
        raise InvariantBreach(f"vehicle conservation off by {worst:.3e}")
    return RunRecord(config, scenario, seed, world.revenue, world.cost, world.trips, metrics, actions, states,
                     incidents, convergence, worst, world if keep_world else None)


def replay_profit(world: World, initial_on_duty: float) -> tuple[float, float]:
    """Rebuild ``(revenue, cost)`` from the event log and the request table alone.

    Revenue is the fare of every matched request; cost integrates the on-duty
    count, which changes only through park and activate events.
    """
    if not world.config.record_events:
        raise ValueError("the run did not record events")
    fares = world.requests["fare"]
    revenue = float(sum(fares[rid] for _, kind, rid, _, _ in world.events if kind == "match"))
    changes = sorted((t, -1 if kind == "park" else 1) for t, kind, _, _, _ in world.events
                     if kind in ("park", "activate"))
    cpm, dt = world.network.cost_per_minute, world.dt
    cost, on, j = 0.0, initial_on_duty, 0
    for entry in world.logs:
        while j < len(changes) and changes[j][0] <= entry.time + 1e-9:
            on += changes[j][1]
            j += 1
        cost += cpm * on * dt
    return revenue, cost


# ---------------------------------------------------------------------------
# experiments

def profit_gap(joint: float, other: float) -> float:
    """Relative improvement of ``joint`` over ``other`` in percent."""
    if joint == other:
        return 0.0
    return 100.0 * (joint - other) / abs(other) if other != 0 else float("inf")


def compare_strategies(city: City, scenario: Scenario, config: MpcConfig | None = None,
                       seeds=None, modes=MODES, window=None) -> dict:
    """Run each mode on identical seeds; per-seed rows plus mean gaps in percent.

    With ``window = (t0, t1)`` profits and trips count only the control
    periods starting inside it.
    """
    config = config or MpcConfig()
    seeds = tuple(scenario.seeds if seeds is None else seeds)
    rows = []
    for seed in seeds:
        runs = {m: run_mpc(city, scenario, replace(config, mode=m), seed, keep_world=False) for m in modes}
        if window is None:
            profit = {m: r.profit for m, r in runs.items()}
            trips = {m: r.trips for m, r in runs.items()}
        else:
            profit = {m: r.profit_between(*window) for m, r in runs.items()}
            trips = {m: r.trips_between(*window) for m, r in runs.items()}
        a, b = modes[0], modes[-1]
        rows.append({"seed": seed, **{f"profit_{m}": profit[m] for m in modes},
                     **{f"trips_{m}": trips[m] for m in modes},
                     "profit_gap_pct": profit_gap(profit[a], profit[b]),
                     "trips_gap_pct": profit_gap(trips[a], trips[b]),
                     "runs": runs})
    return {"rows": rows, "window": window,
            "profit_gap_pct": float(np.mean([r["profit_gap_pct"] for r in rows])),
            "trips_gap_pct": float(np.mean([r["trips_gap_pct"] for r in rows])),
            "pooled_profit_gap_pct": profit_gap(sum(r[f"profit_{modes[0]}"] for r in rows),
                                                sum(r[f"profit_{modes[-1]}"] for r in rows))}


RECOVERY_BAND = 0.2


def shock_summary(record: RunRecord, zone: int, surge_start: float, kind: str = "pickup") -> dict:
    """Peak pickup time after the surge onset and the minutes until it is back within 20% of
    the pre-surge mean (the remaining run length if it never is)."""
    times = record.times
    series = record.pickup_series(zone, kind)
    before = series[(times < surge_start) & np.isfinite(series)]
    if before.size == 0:
        raise ValueError("no pickups before the surge to set a baseline")
    base = float(before.mean())
    after = times >= surge_start
    tail, ts = series[after], times[after]
    finite = np.isfinite(tail)
    peak_idx = int(np.nanargmax(np.where(finite, tail, -np.inf)))
    recovered = np.flatnonzero(finite[peak_idx:] & (tail[peak_idx:] <= (1 + RECOVERY_BAND) * base))
    period = record.config.period
    if recovered.size:
        recovery = float(ts[peak_idx + recovered[0]] - surge_start)
    else:
        recovery = float(ts[-1] + period - surge_start)
    return {"baseline": base, "peak": float(tail[peak_idx]), "peak_time": float(ts[peak_idx]),
            "recovery_minutes": recovery, "recovered": bool(recovered.size)}


SURGE_AFTERMATH = 30.0   # minutes after the surge ends that still count towards its profit


def surge_experiment(city: City, scenario: Scenario, config: MpcConfig | None = None, seeds=None,
                     kind: str = "wait") -> dict:
    """Both modes under the scenario's surge.

    Profit and trips are counted from the onset until ``SURGE_AFTERMATH``
    minutes after the surge ends; the pickup-time shock of the surged zone is
    summarised by :func:`shock_summary` on the ``kind`` series.
    """
    if scenario.surge is None:
        raise ValueError("scenario has no surge")
    sp = scenario.surge
    window = (sp.start, sp.start + sp.duration + SURGE_AFTERMATH)
    cmp = compare_strategies(city, scenario, config, seeds, window=window)
    for row in cmp["rows"]:
        for m, rec in row["runs"].items():
            row[f"shock_{m}"] = shock_summary(rec, sp.zone, sp.start, kind)
    return cmp


def horizon_sweep(city: City, scenario: Scenario, horizons=(10.0, 20.0, 30.0, 60.0),
                  config: MpcConfig | None = None, seeds=None) -> list[dict]:
    """Mean closed-loop profit and its standard error for each prediction horizon."""
    config = config or MpcConfig()
    seeds = tuple(scenario.seeds if seeds is None else seeds)
    out = []
    for h in horizons:
        profits = [run_mpc(city, scenario, replace(config, horizon=float(h)), s, keep_world=False).profit
                   for s in seeds]
        se = float(np.std(profits, ddof=1) / np.sqrt(len(profits))) if len(profits) > 1 else 0.0
        out.append({"horizon": float(h), "mean_profit": float(np.mean(profits)), "std_error": se,
                    "profits": profits})
    return out


def _gap(bound: float, achieved: float) -> float:
    if abs(achieved) < 1e-9:
        return 0.0 if abs(bound) < 1e-9 else float("inf")
    return (bound - achieved) / abs(achieved)


def plan_idle_profile(traj, stages: int, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-step prices and idle stocks ``(H, n, K)`` of a model trajectory."""
    idle = np.array([s.N_v for s in traj.states[:-1]])
    prices = np.array([a.p for a in traj.actions])
    K = idle.shape[1]
    return prices.reshape(stages, steps, K), idle.reshape(stages, steps, K)


def bound_report(city: City, scenario: Scenario, config: MpcConfig | None = None, seed: int = 0,
                 every: int = 1, extra_starts: bool = True) -> dict:
    """Closed-loop run with the NLP controller that also bounds every ``every``-th step.

    At a bounded step the achieved value is the best plan profit over the
    prediction horizon from the observed state: the controller's own plan and,
    with ``extra_starts``, the NLP restarted from the decomposition's and the
    concave program's plans.  The decomposition bound is told about every such
    plan; the concave bound is solved from the same state.
    """
    config = replace(config or MpcConfig(), solver="nlp")
    net, beh = city.network, city.behavior
    rows, convergence = [], []
    counter = {"k": 0, "lam": None, "x": None}

    def hook(t, state, demand, planner):
        k = counter["k"]
        counter["k"] += 1
        if k % every:
            return
        res = planner.last_info.get("result")
        if res is None:
            return
        joint = config.mode == "joint"
        t0 = time.perf_counter()
        dd = DualDecomposition(net, beh, demand, state, config.dual)
        dd.add_plan(*plan_idle_profile(res.trajectory, config.stages, net.steps_per_period))
        dres = dd.run(counter["lam"])
        bound = dres.upper_bound
        t1 = time.perf_counter()
        inst = ConcaveInstance(net, beh, demand, state, config.concave, t, rebalancing=joint)
        x0 = None if counter["x"] is None else shift_concave(inst, counter["x"])
        cres = solve_concave(inst, x0)
        counter["x"] = cres.x
        t2 = time.perf_counter()
        plans = [res]
        if extra_starts:
            nlp = NlpInstance(net, beh, demand, state, config.mode, t)
            starts = [inst.to_actions(cres.x)]
            if np.isfinite(dres.primal_value):
                starts.append(targets_to_actions(state, dres.plan_prices, dres.plan_idle, net, joint))
            for guess in starts:
                alt = solve_original_nlp(nlp, guess, config.warm_nlp)
                if alt.feasible:
                    plans.append(alt)
        best = max(plans, key=lambda r: r.profit)
        if len(plans) > 1:
            for plan in plans[1:]:
                dd.add_plan(*plan_idle_profile(plan.trajectory, config.stages, net.steps_per_period))
            # the bound must also dominate the restarted plans: re-evaluate at the best multipliers
            bound = dd.dual_iteration(dres.best_multipliers.values).dual_value
        counter["lam"] = np.append(dres.multipliers.values[1:], dres.multipliers.values[-1])
        t3 = time.perf_counter()
        for row in dres.gap_log:
            convergence.append({"time": t, **row})
        achieved = best.profit
        rows.append({"time": t, "achieved": achieved, "controller_plan": res.profit,
                     "dual_bound": bound, "dual_primal": dres.primal_value,
                     "concave_bound": float(cres.value), "concave_certificate": float(cres.dual_bound),
                     "concave_certified": bool(cres.certified),
                     "dual_gap": _gap(bound, achieved), "concave_gap": _gap(cres.value, achieved),
                     "dual_iterations": dres.iterations, "dual_seconds": (t1 - t0) + (t3 - t2),
                     "concave_seconds": t2 - t1})

    record = run_mpc(city, scenario, config, seed, on_step=hook, keep_world=False)
    ordered = [r["achieved"] <= r["dual_bound"] + 1e-6 * max(1.0, abs(r["dual_bound"]))
               and r["dual_bound"] <= r["concave_bound"] + 1e-6 * max(1.0, abs(r["concave_bound"]))
               for r in rows]
    return {"rows": rows, "convergence": convergence, "record": record,
            "violations": int(len(ordered) - sum(ordered)),
            "mean_dual_gap": float(np.mean([r["dual_gap"] for r in rows])) if rows else 0.0,
            "mean_concave_gap": float(np.mean([r["concave_gap"] for r in rows])) if rows else 0.0}


__all__ = ["MpcConfig", "RunRecord", "run_mpc", "replay_profit", "compare_strategies", "surge_experiment",
           "horizon_sweep", "bound_report", "shock_summary", "targets_to_actions", "InvariantBreach"]
