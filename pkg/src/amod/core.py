"""Macroscopic network-flow model of an autonomous ride-hailing fleet.

State blocks (K zones):

* ``Q_w[i]``  passengers waiting for a match in zone i
* ``Q_m[i]``  matched passengers waiting for pickup (equals matched vehicles)
* ``Q_b[i,j]`` passengers riding from i to j (equals occupied vehicles)
* ``N_v[i]``  idle vehicles, ``N_r[i,j]`` relocating vehicles, ``N_p[i]`` parked vehicles

Times are minutes, rates are per minute and prices are currency per minute of
trip time.  Operating cost is configured per hour and converted on use.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Sequence

import numpy as np

from .config import BehaviorParams, NetworkConfig

CONSERVATION_TOL = 1e-9
# slack used when deciding that a bound is breached rather than rounding noise
FEAS_TOL = 1e-7


class InfeasibleActionError(ValueError):
    """An action would push the parked stock outside its bounds."""

    def __init__(self, constraint: str, zones, magnitude: float, time: float | None = None):
        self.constraint = constraint
        self.zones = tuple(int(z) for z in np.atleast_1d(zones))
        self.magnitude = float(magnitude)
        self.time = time
        super().__init__(f"{constraint} violated in zone(s) {[z + 1 for z in self.zones]} "
                         f"by {self.magnitude:.6g}" + ("" if time is None else f" at t={time:g}"))


class UndefinedWaitError(ValueError):
    """Pickup time requested for a zone without idle vehicles."""


@dataclass(frozen=True)
class SystemState:
    Q_w: np.ndarray
    Q_m: np.ndarray
    Q_b: np.ndarray
    N_v: np.ndarray
    N_r: np.ndarray
    N_p: np.ndarray

    @property
    def zone_count(self) -> int:
        return self.Q_w.shape[0]

    def fleet_total(self) -> float:
        return float(self.N_v.sum() + self.Q_m.sum() + self.Q_b.sum()
                     + self.N_r.sum() + self.N_p.sum())

    def on_duty(self) -> float:
        return float(self.N_v.sum() + self.Q_m.sum() + self.Q_b.sum() + self.N_r.sum())

    def occupied(self) -> np.ndarray:
        """Vehicles per zone that are busy (matched or carrying a passenger out of the zone)."""
        return self.Q_m + self.Q_b.sum(axis=1)

    def copy(self) -> "SystemState":
        return SystemState(*(np.array(getattr(self, f)) for f in _FIELDS))

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in _FIELDS}

    @classmethod
    def empty(cls, K: int) -> "SystemState":
        return cls(np.zeros(K), np.zeros(K), np.zeros((K, K)), np.zeros(K),
                   np.zeros((K, K)), np.zeros(K))

    @classmethod
    def initial(cls, network: NetworkConfig, idle: np.ndarray | float | None = None) -> "SystemState":
        """Empty passenger queues; ``idle`` vehicles per zone on duty, the rest parked evenly."""
        K, N = network.zone_count, float(network.fleet_size)
        idle = np.full(K, network.idle_floor) if idle is None else np.broadcast_to(
            np.asarray(idle, float), (K,)).copy()
        parked = np.full(K, (N - idle.sum()) / K)
        if np.any(parked < 0):
            raise ValueError("idle allocation exceeds the fleet")
        return cls(np.zeros(K), np.zeros(K), np.zeros((K, K)), idle, np.zeros((K, K)), parked)


_FIELDS = ("Q_w", "Q_m", "Q_b", "N_v", "N_r", "N_p")


@dataclass(frozen=True)
class ControlAction:
    p: np.ndarray
    r: np.ndarray
    s: np.ndarray

    @classmethod
    def idle(cls, K: int, price: float = 0.0) -> "ControlAction":
        return cls(np.full(K, float(price)), np.zeros((K, K)), np.zeros(K))

    def without_rebalancing(self) -> "ControlAction":
        return ControlAction(self.p, np.zeros_like(self.r), self.s)


# ---------------------------------------------------------------------------
# behavioural primitives

def demand_rate(qbar, p, w, tau, params: BehaviorParams):
    return np.asarray(qbar) * np.exp(-params.sensitivity * (params.value_of_time * np.asarray(w)
                                                            + np.asarray(p) * np.asarray(tau)))


def _split(q):
    q = np.asarray(q, float)
    tot = q.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, q / np.where(tot > 0, tot, 1.0), 0.0)


def match_rate(q, Q_w, N_v, N_v_lb):
    total = np.minimum(Q_w, np.maximum(np.asarray(N_v) - N_v_lb, 0.0))
    return _split(q) * np.asarray(total)[..., None]


def cancel_rate(Q_w, N_v, coeffs):
    c0, c1, c2 = coeffs
    return np.minimum(Q_w, np.maximum(0.0, c0 + c1 * np.asarray(Q_w) + c2 * np.asarray(N_v)))


def pickup_rate(q, Q_m, N_v, beta, theta):
    total = np.asarray(beta) * np.asarray(Q_m) * np.power(np.asarray(N_v, float), theta)
    return _split(q) * np.asarray(total)[..., None]


def pickup_time(N_v, beta, theta):
    N_v = np.asarray(N_v, float)
    if np.any(N_v <= 0):
        raise UndefinedWaitError("pickup time is undefined without idle vehicles")
    return np.power(N_v, -np.asarray(theta)) / np.asarray(beta)


def trip_completion(Q_b, tau, kappa):
    return kappa / np.asarray(tau) * np.asarray(Q_b)


# ---------------------------------------------------------------------------
# shared flow kernel

NUMPY_OPS = SimpleNamespace(exp=np.exp, power=np.power, relu=lambda x: np.maximum(x, 0.0),
                            minimum=np.minimum, where=np.where)


def wait_estimate(N_v, beta, theta, ops=NUMPY_OPS):
    """Pickup time with +inf for an empty zone, so demand vanishes instead of raising."""
    safe = ops.where(N_v > 0, N_v, 1.0)
    return ops.where(N_v > 0, ops.power(safe, -theta) / beta, np.inf)


def passenger_flows(qbar, p, tau, Q_w, Q_m, N_v, params: BehaviorParams, beta, theta,
                    N_v_lb, dt, ops=NUMPY_OPS):
    """Demand, matching, cancellation and pickup flows for one integration step.

    Origins may carry arbitrary leading batch axes; the destination axis is last
    for ``qbar``/``tau`` and the returned per-destination flows.  Outflows are
    limited so that one Euler step of length ``dt`` cannot overdraw a queue:
    matches plus cancellations take at most ``Q_w/dt`` and pickups at most
    ``Q_m/dt``.  Returns ``(q, m, cancel, b)``.
    """
    eps, alpha = params.sensitivity, params.value_of_time
    w = wait_estimate(N_v, beta, theta, ops)
    expo = ops.where((N_v > 0)[..., None], -eps * (alpha * ops.where(N_v > 0, w, 0.0)[..., None] + p[..., None] * tau),
                     -np.inf)
    q = qbar * ops.exp(expo)
    qsum = q.sum(axis=-1)
    frac = q / ops.where(qsum > 0, qsum, 1.0)[..., None]
    c0, c1, c2 = params.cancel_coeffs
    m_tot = ops.minimum(Q_w, ops.relu(N_v - N_v_lb))
    c_tot = ops.minimum(Q_w, ops.relu(c0 + c1 * Q_w + c2 * N_v))
    out = m_tot + c_tot
    scale = ops.where(out * dt > Q_w, Q_w / ops.where(out > 0, out * dt, 1.0), 1.0)
    m_tot = m_tot * scale
    c_tot = c_tot * scale
    b_tot = ops.minimum(beta * Q_m * ops.power(ops.relu(N_v), theta), Q_m / dt)
    return q, frac * m_tot[..., None], c_tot, frac * b_tot[..., None]


# ---------------------------------------------------------------------------
# dynamics

@dataclass(frozen=True)
class StepFlows:
    q: np.ndarray
    m: np.ndarray
    cancel: np.ndarray
    b: np.ndarray
    completed: np.ndarray
    relocated: np.ndarray


def _flows(state: SystemState, action: ControlAction, qbar, network: NetworkConfig,
           behavior: BehaviorParams, dt: float):
    tau = network.travel_time
    q, m, cancel, b = passenger_flows(np.asarray(qbar, float), np.asarray(action.p, float), tau,
                                      state.Q_w, state.Q_m, state.N_v, behavior,
                                      behavior.pickup_scale, behavior.pickup_exponent,
                                      network.idle_floor, dt)
    rate = np.minimum(behavior.completion_scale / tau, 1.0 / dt)
    return StepFlows(q, m, cancel, b, rate * state.Q_b, rate * state.N_r)


def _euler(state, action, flows: StepFlows, dt):
    r = np.asarray(action.r, float) * (1 - np.eye(state.zone_count))
    s = np.asarray(action.s, float)
    f = flows
    Q_w = state.Q_w + dt * (f.q.sum(1) - f.m.sum(1) - f.cancel)
    Q_m = state.Q_m + dt * (f.m.sum(1) - f.b.sum(1))
    Q_b = state.Q_b + dt * (f.b - f.completed)
    N_v = state.N_v + dt * (s + f.completed.sum(0) + f.relocated.sum(0) - f.m.sum(1) - r.sum(1))
    N_r = state.N_r + dt * (r - f.relocated)
    N_p = state.N_p - dt * s
    return Q_w, Q_m, Q_b, N_v, N_r, N_p, r


def step_dynamics(state: SystemState, action: ControlAction, qbar, network: NetworkConfig,
                  behavior: BehaviorParams, dt: float | None = None, t: float = 0.0,
                  strict: bool = True, return_flows: bool = False):
    """Advance the full model by one forward-Euler step.

    Negative vehicle blocks are clipped to zero and the clipped mass is booked
    against the parked stock of the same zone, which keeps the fleet total
    exact.  With ``strict`` an action that would empty the parked stock below
    zero or overfill it raises :class:`InfeasibleActionError`; otherwise the
    parked stock is clipped too and the shortfall is taken back from vehicles
    dispatched to relocate this step, then from idle vehicles.
    """
    dt = network.dt if dt is None else dt
    flows = _flows(state, action, qbar, network, behavior, dt)
    Q_w, Q_m, Q_b, N_v, N_r, N_p, r = _euler(state, action, flows, dt)
    Q_w = np.maximum(Q_w, 0.0)
    residual = np.zeros_like(N_p)
    for arr in (Q_m, N_v):
        neg = np.minimum(arr, 0.0)
        residual += neg
        arr -= neg
    for arr in (Q_b, N_r):
        neg = np.minimum(arr, 0.0)
        residual += neg.sum(axis=1)
        arr -= neg
    N_p = N_p + residual
    cap = network.parking_cap_at(t)
    if strict:
        low = N_p < -FEAS_TOL
        if np.any(low):
            raise InfeasibleActionError("parking_bounds", np.flatnonzero(low), -N_p[low].min(), t)
        high = N_p > cap + FEAS_TOL
        if np.any(high):
            raise InfeasibleActionError("parking_bounds", np.flatnonzero(high),
                                        (N_p - cap)[high].max(), t)
    short = np.maximum(-N_p, 0.0)
    if np.any(short > 0):
        # activation beyond the parked stock never happened: withdraw it from idle,
        # and if those vehicles were already sent relocating, recall them
        N_p = N_p + short
        N_v = N_v - short
        deficit = np.maximum(-N_v, 0.0)
        N_v = N_v + deficit
        launched = dt * r
        tot = launched.sum(1)
        if np.any(deficit > tot + FEAS_TOL):
            raise InfeasibleActionError("state_nonneg", np.flatnonzero(deficit > tot), (deficit - tot).max(), t)
        frac = np.divide(launched, tot[:, None], out=np.zeros_like(launched), where=tot[:, None] > 0)
        N_r = np.maximum(N_r - frac * np.minimum(deficit, tot)[:, None], 0.0)
    new = SystemState(Q_w, Q_m, Q_b, N_v, N_r, N_p)
    return (new, flows) if return_flows else new


def profit_rate(state: SystemState, action: ControlAction, qbar, network: NetworkConfig,
                behavior: BehaviorParams, flows: StepFlows | None = None) -> float:
    if flows is None:
        flows = _flows(state, action, qbar, network, behavior, network.dt)
    revenue = float((flows.m * np.asarray(action.p)[:, None] * network.travel_time).sum())
    return revenue - network.cost_per_minute * (network.fleet_size - float(state.N_p.sum()))


@dataclass
class Trajectory:
    """Substep-resolution record of a simulation."""

    times: np.ndarray
    states: list
    actions: list
    revenue: np.ndarray
    cost: np.ndarray
    trips: np.ndarray  # matches per substep, summed over OD pairs

    @property
    def profit(self) -> float:
        return float(self.revenue.sum() - self.cost.sum())

    @property
    def final(self) -> SystemState:
        return self.states[-1]

    def period_profit(self, steps_per_period: int) -> np.ndarray:
        per = self.revenue - self.cost
        return per.reshape(-1, steps_per_period).sum(axis=1)


def simulate(state: SystemState, actions: Sequence[ControlAction], demand, network: NetworkConfig,
             behavior: BehaviorParams, t0: float = 0.0, strict: bool = True) -> Trajectory:
    """Roll the model forward one control period per action.

    ``demand`` is either an array ``(len(actions), K, K)`` of base rates per
    period or a :class:`DemandProfile`.
    """
    n = network.steps_per_period
    dt = network.dt
    times, states, acts, rev, cost, trips = [t0], [state], [], [], [], []
    for k, action in enumerate(actions):
        tk = t0 + k * network.control_period
        qbar = demand.rate_at(tk) if hasattr(demand, "rate_at") else demand[k]
        for sub in range(n):
            t = tk + sub * dt
            new, flows = step_dynamics(state, action, qbar, network, behavior, dt, t + dt,
                                       strict=strict, return_flows=True)
            rev.append(dt * float((flows.m * np.asarray(action.p)[:, None] * network.travel_time).sum()))
            cost.append(dt * network.cost_per_minute * (network.fleet_size - float(state.N_p.sum())))
            trips.append(dt * float(flows.m.sum()))
            acts.append(action)
            state = new
            states.append(state)
            times.append(t + dt)
    return Trajectory(np.array(times), states, acts, np.array(rev), np.array(cost), np.array(trips))


# ---------------------------------------------------------------------------
# feasibility

@dataclass(frozen=True)
class Violation:
    time: float
    zones: tuple
    constraint: str
    magnitude: float


def check_feasibility(states: Sequence[SystemState], actions: Sequence[ControlAction],
                      network: NetworkConfig, times: Sequence[float] | None = None,
                      tol: float = FEAS_TOL) -> list[Violation]:
    """List every bound breach along a trajectory.

    ``actions[k]`` is the action applied from ``states[k]``; the lists may have
    equal length or one more state than actions.  Constraint ids are
    ``rebalance_nonneg``, ``price_bounds``, ``idle_floor``, ``parking_bounds``
    and ``state_nonneg``.
    """
    out: list[Violation] = []
    times = list(times) if times is not None else [k * network.dt for k in range(len(states))]

    def add(t, mask, name, mag):
        if np.any(mask):
            out.append(Violation(float(t), tuple(int(z) for z in np.unique(np.nonzero(mask)[0])),
                                 name, float(np.max(mag[mask]))))

    for k, a in enumerate(actions):
        t = times[k]
        r = np.asarray(a.r, float) * (1 - np.eye(network.zone_count))
        add(t, r < -tol, "rebalance_nonneg", -r)
        p = np.asarray(a.p, float)
        add(t, p < -tol, "price_bounds", -p)
        add(t, p > network.price_cap + tol, "price_bounds", p - network.price_cap)
    for k, s in enumerate(states):
        t = times[k]
        add(t, s.N_v < network.idle_floor - tol, "idle_floor", network.idle_floor - s.N_v)
        cap = network.parking_cap_at(max(t - 1e-9, 0.0))
        add(t, s.N_p < -tol, "parking_bounds", -s.N_p)
        add(t, s.N_p > cap + tol, "parking_bounds", s.N_p - cap)
        for name in ("Q_w", "Q_m", "N_r", "Q_b"):
            arr = getattr(s, name)
            neg = -arr if arr.ndim == 1 else (-arr).max(axis=1)
            add(t, neg > tol, "state_nonneg", neg)
    return out
