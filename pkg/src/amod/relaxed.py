"""Zone-separable relaxation of the network-flow model.

In-vehicle passengers are tracked per origin only, split into trips ending
inside the zone (``Q_intra``) and trips leaving it (``Q_inter``).  Trips that
leave are assumed to take the shortest outbound time, relocation is
instantaneous and the idle count of each zone becomes a decision.  The
relaxation never loses profit relative to the full model, which is what makes
it useful for upper bounds.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import BehaviorParams, NetworkConfig
from .core import SystemState, passenger_flows


@dataclass(frozen=True)
class RelaxedState:
    Q_w: np.ndarray
    Q_m: np.ndarray
    Q_intra: np.ndarray
    Q_inter: np.ndarray

    @classmethod
    def zeros(cls, K: int) -> "RelaxedState":
        return cls(np.zeros(K), np.zeros(K), np.zeros(K), np.zeros(K))

    def zone(self, i: int) -> tuple:
        return (float(self.Q_w[i]), float(self.Q_m[i]), float(self.Q_intra[i]), float(self.Q_inter[i]))

    def stacked(self) -> np.ndarray:
        """``(K, 4)`` array in the order waiting, matched, intra, inter."""
        return np.stack([self.Q_w, self.Q_m, self.Q_intra, self.Q_inter], axis=-1)


@dataclass(frozen=True)
class RelaxedAction:
    p: np.ndarray
    N_v: np.ndarray


def min_outbound_time(network: NetworkConfig) -> np.ndarray:
    return network.min_outbound_time


def relax_state(full: SystemState) -> RelaxedState:
    diag = np.diag(full.Q_b).copy()
    return RelaxedState(np.array(full.Q_w), np.array(full.Q_m), diag, full.Q_b.sum(axis=1) - diag)


def relaxed_completion(state: RelaxedState, tau_ii, tau_bar, kappa):
    return kappa / np.asarray(tau_ii) * state.Q_intra, kappa / np.asarray(tau_bar) * state.Q_inter


def completion_fractions(network: NetworkConfig, behavior: BehaviorParams, dt: float | None = None):
    """Per-step completion probabilities ``(intra, inter)`` per zone, capped at one."""
    dt = network.dt if dt is None else dt
    kappa = behavior.completion_scale
    tau_ii = np.diag(network.travel_time)
    return (np.minimum(kappa * dt / tau_ii, 1.0),
            np.minimum(kappa * dt / network.min_outbound_time, 1.0))


def _zone_flows(state: RelaxedState, p, N_v, qbar, network, behavior, dt):
    return passenger_flows(np.asarray(qbar, float), np.asarray(p, float), network.travel_time,
                           state.Q_w, state.Q_m, np.asarray(N_v, float), behavior,
                           behavior.pickup_scale, behavior.pickup_exponent, network.idle_floor, dt)


def step_relaxed(state: RelaxedState, action: RelaxedAction, qbar, network: NetworkConfig,
                 behavior: BehaviorParams, dt: float | None = None, return_flows: bool = False):
    dt = network.dt if dt is None else dt
    q, m, cancel, b = _zone_flows(state, action.p, action.N_v, qbar, network, behavior, dt)
    fa, fe = completion_fractions(network, behavior, dt)
    K = state.Q_w.shape[0]
    b_ii = b[np.arange(K), np.arange(K)]
    b_out = b.sum(axis=1) - b_ii
    new = RelaxedState(
        np.maximum(state.Q_w + dt * (q.sum(1) - m.sum(1) - cancel), 0.0),
        np.maximum(state.Q_m + dt * (m.sum(1) - b.sum(1)), 0.0),
        np.maximum(state.Q_intra * (1 - fa) + dt * b_ii, 0.0),
        np.maximum(state.Q_inter * (1 - fe) + dt * b_out, 0.0),
    )
    return (new, (q, m, cancel, b)) if return_flows else new


def on_duty_by_zone(state: RelaxedState, action: RelaxedAction) -> np.ndarray:
    return np.asarray(action.N_v, float) + state.Q_m + state.Q_intra + state.Q_inter


def on_duty_count(state: RelaxedState, action: RelaxedAction) -> float:
    return float(on_duty_by_zone(state, action).sum())


@dataclass
class RelaxedTrajectory:
    """Per-stage accounting of a relaxed simulation.

    ``revenue[t, i]`` and ``on_duty[t, i]`` are integrals over stage ``t`` (the
    latter in vehicle-minutes); ``peak_on_duty[t]`` is the largest fleet-wide
    on-duty count at any step in the stage.
    """

    states: list
    revenue: np.ndarray
    on_duty: np.ndarray
    peak_on_duty: np.ndarray
    peak_busy: np.ndarray
    trips: np.ndarray

    def zone_value(self, lam, cost_per_minute: float) -> np.ndarray:
        c = cost_per_minute + np.asarray(lam, float)
        return self.revenue.sum(0) - (c[:, None] * self.on_duty).sum(0)

    def value(self, lam, cost_per_minute: float) -> float:
        return float(self.zone_value(lam, cost_per_minute).sum())


def simulate_relaxed(state: RelaxedState, prices, idle, demand, network: NetworkConfig,
                     behavior: BehaviorParams) -> RelaxedTrajectory:
    """Run the relaxed model over ``H`` stages.

    ``prices`` and ``idle`` are ``(H, K)`` (held over each stage) or
    ``(H, n, K)`` with one value per integration step.  ``demand`` is ``(H, K, K)``.
    """
    prices = np.asarray(prices, float)
    idle = np.asarray(idle, float)
    demand = np.asarray(demand, float)
    H, K = demand.shape[0], demand.shape[1]
    n, dt = network.steps_per_period, network.dt
    if prices.ndim == 2:
        prices = np.repeat(prices[:, None, :], n, axis=1)
    if idle.ndim == 2:
        idle = np.repeat(idle[:, None, :], n, axis=1)
    rev = np.zeros((H, K))
    onduty = np.zeros((H, K))
    peak = np.zeros(H)
    busy = np.zeros((H, K))
    trips = np.zeros((H, K))
    states = [state]
    tau = network.travel_time
    for t in range(H):
        for k in range(n):
            act = RelaxedAction(prices[t, k], idle[t, k])
            occ = state.Q_m + state.Q_intra + state.Q_inter
            on = idle[t, k] + occ
            peak[t] = max(peak[t], float(on.sum()))
            busy[t] = np.maximum(busy[t], occ)
            onduty[t] += dt * on
            state, (q, m, cancel, b) = step_relaxed(state, act, demand[t], network, behavior, dt,
                                                    return_flows=True)
            rev[t] += dt * (m * prices[t, k][:, None] * tau).sum(1)
            trips[t] += dt * m.sum(1)
        states.append(state)
    return RelaxedTrajectory(states, rev, onduty, peak, busy, trips)
