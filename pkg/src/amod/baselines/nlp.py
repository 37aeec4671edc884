"""Direct single-shooting solution of the full profit-maximisation problem.

The decision vector holds one price per zone, one rebalancing rate per
ordered zone pair and one resize rate per zone for each control period.  A
smoothed copy of the dynamics is differentiated with JAX; bound-constrained
L-BFGS-B maximises profit minus exterior penalties on the state bounds, with
the penalty weight raised between rounds.  The result is re-simulated with the
exact dynamics, and periods whose moves would breach a bound are scaled back
until the plan is feasible.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from types import SimpleNamespace

import jax
import jax.numpy as jnp
import numpy as np
from scipy.optimize import minimize

from ..config import BehaviorParams, NetworkConfig
from ..core import (ControlAction, SystemState, Trajectory, check_feasibility,
                    passenger_flows, simulate)

jax.config.update("jax_enable_x64", True)

log = logging.getLogger(__name__)

MODES = ("joint", "pricing_only")
R_SCALE = 10.0   # vehicles per minute represented by one unit of a rebalancing variable
S_SCALE = 10.0


@dataclass
class NlpConfig:
    temperature: float = 0.1
    penalties: tuple = (1.0, 30.0, 1000.0)
    maxiter: int = 80
    profit_scale: float = 1000.0
    r_max: float = 100.0         # vehicles per minute per zone pair
    s_max: float = 200.0         # vehicles per minute per zone
    repair_bisections: int = 12


@dataclass
class NlpInstance:
    network: NetworkConfig
    behavior: BehaviorParams
    demand: np.ndarray            # (H, K, K) base rates per control period
    state: SystemState
    mode: str = "joint"
    t0: float = 0.0

    def __post_init__(self):
        self.demand = np.asarray(self.demand, float)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        K = self.network.zone_count
        if self.demand.ndim != 3 or self.demand.shape[1:] != (K, K):
            raise ValueError("demand must be (H, K, K)")

    @property
    def horizon(self) -> int:
        return self.demand.shape[0]

    @property
    def zone_count(self) -> int:
        return self.network.zone_count

    @property
    def per_stage(self) -> int:
        K = self.zone_count
        return K + (K * (K - 1) if self.mode == "joint" else 0) + K

    @property
    def size(self) -> int:
        return self.horizon * self.per_stage

    def bounds(self, config: NlpConfig | None = None) -> list:
        c = config or NlpConfig()
        K = self.zone_count
        stage = [(0.0, self.network.price_cap)] * K
        if self.mode == "joint":
            stage += [(0.0, c.r_max / R_SCALE)] * (K * (K - 1))
        stage += [(-c.s_max / S_SCALE, c.s_max / S_SCALE)] * K
        return stage * self.horizon

    def pack(self, actions) -> np.ndarray:
        K = self.zone_count
        off = ~np.eye(K, dtype=bool)
        parts = []
        for a in actions:
            parts.append(np.asarray(a.p, float))
            if self.mode == "joint":
                parts.append(np.asarray(a.r, float)[off] / R_SCALE)
            parts.append(np.asarray(a.s, float) / S_SCALE)
        return np.concatenate(parts)

    def unpack(self, x) -> list[ControlAction]:
        K, H = self.zone_count, self.horizon
        off = ~np.eye(K, dtype=bool)
        x = np.asarray(x, float).reshape(H, self.per_stage)
        out = []
        for t in range(H):
            p = x[t, :K].copy()
            r = np.zeros((K, K))
            k = K
            if self.mode == "joint":
                r[off] = x[t, K:K + K * (K - 1)] * R_SCALE
                k += K * (K - 1)
            s = x[t, k:k + K] * S_SCALE
            out.append(ControlAction(p, r, s))
        return out

    def default_guess(self) -> list[ControlAction]:
        """Mid-range prices, no moves: always feasible."""
        K = self.zone_count
        return [ControlAction.idle(K, 0.5 * self.network.price_cap) for _ in range(self.horizon)]


@dataclass
class NlpResult:
    actions: list
    profit: float
    kkt_residual: float
    feasible: bool
    violations: list
    trajectory: Trajectory
    trace: list = field(default_factory=list)
    repaired: bool = False
    message: str = ""
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# smoothed dynamics

def _softplus(x, temp):
    return temp * jnp.logaddexp(x / temp, 0.0)


def _smooth_ops(temp):
    return SimpleNamespace(exp=jnp.exp, power=jnp.power, where=jnp.where,
                           relu=lambda x: _softplus(x, temp),
                           minimum=lambda a, b: a - _softplus(a - b, temp))


def _rollout(x, consts, demand, state0, mu, temp, H, n, K, joint):
    """Penalised objective of the smoothed dynamics (to be minimised)."""
    ops = _smooth_ops(temp)
    per = K + (K * (K - 1) if joint else 0) + K
    x = x.reshape(H, per)
    p = x[:, :K]
    off = ~np.eye(K, dtype=bool)
    if joint:
        r = jnp.zeros((H, K, K)).at[:, off].set(x[:, K:K + K * (K - 1)] * R_SCALE)
        s = x[:, K + K * (K - 1):] * S_SCALE
    else:
        r = jnp.zeros((H, K, K))
        s = x[:, K:] * S_SCALE
    c = consts
    beh = SimpleNamespace(sensitivity=c["eps"], value_of_time=c["alpha"], cancel_coeffs=c["cancel"])
    tau, dt = c["tau"], c["dt"]
    rate = jnp.minimum(c["kappa"] / tau, 1.0 / dt)

    def sub(carry, inp):
        Q_w, Q_m, Q_b, N_v, N_r, N_p = carry
        pk, rk, sk, qbar = inp
        nv = jnp.maximum(N_v, 1e-3)
        q, m, cancel, b = passenger_flows(qbar, pk, tau, Q_w, Q_m, nv, beh, c["beta"], c["theta"],
                                          c["lb"], dt, ops)
        done = rate * Q_b
        moved = rate * N_r
        revenue = dt * jnp.sum(m * pk[:, None] * tau)
        cost = dt * c["cost"] * (c["N"] - jnp.sum(N_p))
        Q_w = jnp.maximum(Q_w + dt * (q.sum(1) - m.sum(1) - cancel), 0.0)
        Q_m = jnp.maximum(Q_m + dt * (m.sum(1) - b.sum(1)), 0.0)
        Q_b = Q_b + dt * (b - done)
        N_v = N_v + dt * (sk + done.sum(0) + moved.sum(0) - m.sum(1) - rk.sum(1))
        N_r = N_r + dt * (rk - moved)
        N_p = N_p - dt * sk
        pen = (jnp.sum(jax.nn.relu(c["lb"] - N_v) ** 2) + jnp.sum(jax.nn.relu(-N_p) ** 2)
               + jnp.sum(jax.nn.relu(N_p - c["cap"]) ** 2) + jnp.sum(jax.nn.relu(-Q_b) ** 2)
               + jnp.sum(jax.nn.relu(-N_r) ** 2))
        return (Q_w, Q_m, Q_b, N_v, N_r, N_p), (revenue - cost, dt * pen)

    rep = lambda a: jnp.repeat(a, n, axis=0)
    inputs = (rep(p), rep(r), rep(s), rep(demand))
    _, (profit, pen) = jax.lax.scan(sub, state0, inputs)
    return -jnp.sum(profit) / c["scale"] + mu * jnp.sum(pen) / c["scale"], jnp.sum(profit)


_COMPILED: dict = {}


def _objective(H, n, K, joint):
    key = (H, n, K, joint)
    if key not in _COMPILED:
        def f(x, consts, demand, state0, mu, temp):
            return _rollout(x, consts, demand, state0, mu, temp, H, n, K, joint)
        _COMPILED[key] = jax.jit(jax.value_and_grad(f, has_aux=True))
    return _COMPILED[key]


def _constants(inst: NlpInstance, config: NlpConfig) -> dict:
    net, beh = inst.network, inst.behavior
    return {"tau": jnp.asarray(net.travel_time), "dt": net.dt, "kappa": beh.completion_scale,
            "eps": beh.sensitivity, "alpha": beh.value_of_time, "cancel": jnp.asarray(beh.cancel_coeffs),
            "beta": jnp.asarray(beh.pickup_scale), "theta": jnp.asarray(beh.pickup_exponent),
            "lb": float(net.idle_floor), "cost": net.cost_per_minute, "N": float(net.fleet_size),
            "cap": jnp.asarray(net.parking_cap_at(inst.t0)), "scale": config.profit_scale}


def _projected_gradient(x, g, bounds):
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return float(np.linalg.norm(np.clip(x - g, lo, hi) - x, np.inf))


# ---------------------------------------------------------------------------
# exact evaluation and repair

def exact_profit(inst: NlpInstance, actions) -> Trajectory:
    return simulate(inst.state, actions, inst.demand, inst.network, inst.behavior, t0=inst.t0, strict=False)


def _period_ok(inst, state, action, k) -> tuple[bool, Trajectory]:
    traj = simulate(state, [action], inst.demand[k:k + 1], inst.network, inst.behavior,
                    t0=inst.t0 + k * inst.network.control_period, strict=False)
    start_floor = np.minimum(state.N_v, inst.network.idle_floor)
    ok = True
    for s in traj.states[1:]:
        cap = inst.network.parking_cap_at(inst.t0)
        if (np.any(s.N_v < start_floor - 1e-7) or np.any(s.N_p < -1e-7) or np.any(s.N_p > cap + 1e-7)):
            ok = False
            break
    return ok, traj


def repair(inst: NlpInstance, actions, bisections: int = 12) -> tuple[list, bool]:
    """Scale back each period's relocations and resizing until the exact dynamics respect the bounds.

    Activation is first capped by the parked stock.  Idle floors are enforced
    relative to the level at the start of each period when that level is
    already below the floor.  Returns the repaired actions and whether any
    period had to change.
    """
    net = inst.network
    state = inst.state
    out, changed = [], False
    T = net.control_period
    for k, a in enumerate(actions):
        p = np.clip(np.asarray(a.p, float), 0.0, net.price_cap)
        r = np.maximum(np.asarray(a.r, float), 0.0) * (1 - np.eye(net.zone_count))
        s = np.asarray(a.s, float)
        s = np.minimum(s, state.N_p / T)
        cand = ControlAction(p, r, s)
        ok, traj = _period_ok(inst, state, cand, k)
        if not ok:
            changed = True
            lo, hi = 0.0, 1.0
            best = ControlAction(p, np.zeros_like(r), np.maximum(s, 0.0))
            ok0, traj = _period_ok(inst, state, best, k)
            if not ok0:
                best = ControlAction(p, np.zeros_like(r), np.zeros_like(s))
                _, traj = _period_ok(inst, state, best, k)
            for _ in range(bisections):
                mid = 0.5 * (lo + hi)
                trial = ControlAction(p, r * mid, np.where(s < 0, s * mid, s))
                good, tr = _period_ok(inst, state, trial, k)
                if good:
                    lo, best, traj = mid, trial, tr
                else:
                    hi = mid
            cand = best
        elif not np.array_equal(s, np.asarray(a.s, float)) or not np.array_equal(p, np.asarray(a.p, float)):
            changed = True
        out.append(cand)
        state = traj.final
    return out, changed


# ---------------------------------------------------------------------------
# solver

def solve_original_nlp(instance: NlpInstance, initial_guess=None, config: NlpConfig | None = None) -> NlpResult:
    """Locally optimal action plan for ``instance``; see the module docstring."""
    c = config or NlpConfig()
    t_start = time.perf_counter()
    inst = instance
    H, K, n = inst.horizon, inst.zone_count, inst.network.steps_per_period
    guess = initial_guess if initial_guess is not None else inst.default_guess()
    if inst.mode == "pricing_only":
        guess = [a.without_rebalancing() for a in guess]
    bounds = inst.bounds(c)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    x = np.clip(inst.pack(guess), lo, hi)
    if H == 0:
        traj = exact_profit(inst, [])
        return NlpResult([], 0.0, 0.0, True, [], traj, seconds=time.perf_counter() - t_start)
    fn = _objective(H, n, K, inst.mode == "joint")
    consts = _constants(inst, c)
    demand = jnp.asarray(inst.demand)
    s0 = inst.state
    state0 = tuple(jnp.asarray(a, float) for a in (s0.Q_w, s0.Q_m, s0.Q_b, s0.N_v, s0.N_r, s0.N_p))
    trace = []
    kkt = np.nan
    message = ""
    for mu in c.penalties:
        def fg(z):
            (val, prof), g = fn(jnp.asarray(z), consts, demand, state0, mu, c.temperature)
            trace.append({"evaluation": len(trace) + 1, "penalty": mu, "objective": float(val),
                          "smoothed_profit": float(prof)})
            return float(val), np.asarray(g, float)
        res = minimize(fg, x, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": c.maxiter, "ftol": 1e-10, "gtol": 1e-6})
        x = np.clip(res.x, lo, hi)
        message = str(res.message)
        _, g = fg(x)
        kkt = _projected_gradient(x, g, bounds)
    actions = inst.unpack(x)
    actions, repaired = repair(inst, actions, c.repair_bisections)
    traj = exact_profit(inst, actions)
    viol = [v for v in check_feasibility(traj.states, [], inst.network, traj.times)
            if v.constraint != "idle_floor"]
    feasible = not viol
    if repaired:
        log.debug("nlp plan repaired to restore feasibility")
    return NlpResult(actions, traj.profit, kkt, feasible, viol, traj, trace, repaired, message,
                     time.perf_counter() - t_start)


def perturbation_check(instance: NlpInstance, result: NlpResult, draws: int = 100, scale: float = 1e-3,
                       seed: int = 0) -> float:
    """Largest relative profit gain over random feasible perturbations of the returned plan."""
    rng = np.random.default_rng(seed)
    bounds = instance.bounds()
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    x0 = instance.pack(result.actions)
    base = result.profit
    best = -np.inf
    for _ in range(draws):
        x = np.clip(x0 + scale * rng.standard_normal(x0.size) * np.maximum(hi - lo, 1.0), lo, hi)
        acts, _ = repair(instance, instance.unpack(x))
        prof = exact_profit(instance, acts).profit
        best = max(best, (prof - base) / max(abs(base), 1.0))
    return best
