"""Concave benchmark relaxation with instant matching and a fixed pickup time.

Each request is served the moment it is placed, so the only states are
in-vehicle passengers, idle, relocating and parked vehicles, and they evolve
linearly.  The decision for OD pair ``(i, j)`` is the share ``z`` of base
demand that travels, which fixes the fare through the inverse demand curve;
revenue ``qbar * z * (-ln z / eps - alpha * w)`` is concave in ``z``.

With the dynamics linear, every state along the horizon is an affine map of
the decision vector.  :class:`ConcaveInstance` builds those maps once; the
solver is an augmented Lagrangian on the state bounds whose subproblems are
smooth concave programs over the decision box.  The
Lagrangian dual of the problem is separable over decisions, which gives a
cheap certificate: ``dual_bound`` is a guaranteed upper bound for every
multiplier vector.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from ..config import BehaviorParams, NetworkConfig
from ..core import ControlAction, SystemState

log = logging.getLogger(__name__)

Z_MIN = 1e-12   # interior lower bound on demand shares (the fare diverges at zero)


def invert_demand(z, w, tau, behavior: BehaviorParams, price_cap: float | None = None):
    """Fare per minute that makes a share ``z`` of base demand travel."""
    z = np.asarray(z, float)
    if np.any(z <= 0):
        raise ValueError("a zero demand share needs an unbounded price")
    p = (-np.log(z) / behavior.sensitivity - behavior.value_of_time * np.asarray(w, float)) / np.asarray(tau, float)
    hi = np.inf if price_cap is None else price_cap
    return np.clip(p, 0.0, hi)


def fixed_waiting_time(network: NetworkConfig, behavior: BehaviorParams, concentration_cap: float = 1.0 / 3.0):
    """Pickup time with a fixed share of the fleet idle in the zone."""
    if not 0 < concentration_cap <= 1:
        raise ValueError("concentration cap must lie in (0, 1]")
    n = concentration_cap * network.fleet_size
    return np.power(n, -np.asarray(behavior.pickup_exponent, float)) / np.asarray(behavior.pickup_scale, float)


def share_revenue(z, w, behavior: BehaviorParams):
    """Fare revenue per unit of base demand, ``z * (-ln z / eps - alpha * w)`` (zero at ``z = 0``)."""
    z = np.asarray(z, float)
    pos = z > 0
    safe = np.where(pos, z, 1.0)
    val = safe * (-np.log(safe) / behavior.sensitivity - behavior.value_of_time * w)
    return np.where(pos, val, 0.0)


@dataclass
class ConcaveConfig:
    concentration_cap: float = 1.0 / 3.0
    r_max: float = 100.0
    s_max: float = 200.0
    tol: float = 1e-6
    max_outer: int = 12
    max_inner: int = 1000
    rho: float = 1.0
    feas_tol: float = 1e-4


class ConcaveInstance:
    """Linear-dynamics transcription over ``H`` control periods.

    Decision vector ``x = [z (H*K*K), r (H*K*(K-1)), s (H*K)]``.  The constraint
    map ``h(x) = G x + h0 >= 0`` stacks, for every integration step, the idle
    floor, the parked lower bound and the parking capacity.
    """

    def __init__(self, network: NetworkConfig, behavior: BehaviorParams, demand, state: SystemState,
                 config: ConcaveConfig | None = None, t0: float = 0.0, rebalancing: bool = True):
        self.network, self.behavior = network, behavior
        self.config = c = config or ConcaveConfig()
        self.demand = np.asarray(demand, float)
        H, K = self.demand.shape[0], network.zone_count
        self.H, self.K = H, K
        self.n, self.dt = network.steps_per_period, network.dt
        self.w_fixed = fixed_waiting_time(network, behavior, c.concentration_cap)
        if np.any(self.w_fixed <= 0):
            raise ValueError("fixed waiting time must be positive")
        self.t0 = t0
        self.nz, self.nr, self.ns = H * K * K, H * K * (K - 1), H * K
        self.size = self.nz + self.nr + self.ns
        self.off = ~np.eye(K, dtype=bool)
        zmax = np.exp(-behavior.sensitivity * behavior.value_of_time * self.w_fixed)
        zhi = np.broadcast_to(zmax[None, :, None], (H, K, K)).copy()
        zhi[self.demand <= 0] = Z_MIN
        self.lower = np.concatenate([np.full(self.nz, Z_MIN), np.zeros(self.nr), np.full(self.ns, -c.s_max)])
        self.upper = np.concatenate([zhi.ravel(), np.full(self.nr, c.r_max if rebalancing else 0.0),
                                     np.full(self.ns, c.s_max)])
        # initial state: matched passengers ride as if already on board in their own zone
        Q_b = np.array(state.Q_b, float) + np.diag(state.Q_m)
        self.state0 = (Q_b, np.array(state.N_v, float), np.array(state.N_r, float), np.array(state.N_p, float))
        self.floor = np.minimum(network.idle_floor, state.N_v)
        self._build()

    # -- linear maps -----------------------------------------------------------
    def _build(self):
        H, K, n, dt = self.H, self.K, self.n, self.dt
        net, beh = self.network, self.behavior
        f = np.minimum(beh.completion_scale / net.travel_time, 1.0 / dt)
        nb, nv, nr, npk = K * K, K, K * K, K
        X = 2 * K * K + 2 * K
        iv, ir, ip = nb, nb + nv, nb + nv + nr
        M = np.eye(X)
        for i in range(K):
            for j in range(K):
                b = i * K + j
                M[b, b] = 1.0 - dt * f[i, j]
                M[iv + j, b] += dt * f[i, j]
                M[ir + b, ir + b] = 1.0 - dt * f[i, j]
                M[iv + j, ir + b] += dt * f[i, j]
        # per-stage input matrix acting on that stage's decisions
        per = K * K + K * (K - 1) + K
        Bs = []
        offs = np.flatnonzero(self.off.ravel())
        for t in range(H):
            B = np.zeros((X, per))
            qbar = self.demand[t]
            for i in range(K):
                for j in range(K):
                    c = i * K + j
                    B[c, c] += dt * qbar[i, j]            # Q_b gains trips
                    B[iv + i, c] -= dt * qbar[i, j]       # idle vehicles leave
            for k, flat in enumerate(offs):
                i, j = divmod(int(flat), K)
                c = K * K + k
                B[ir + flat, c] += dt                    # relocation starts
                B[iv + i, c] -= dt
            for i in range(K):
                c = K * K + K * (K - 1) + i
                B[iv + i, c] += dt
                B[ip + i, c] -= dt
            Bs.append(B)
        x0 = np.concatenate([self.state0[0].ravel(), self.state0[1], self.state0[2].ravel(), self.state0[3]])
        # map decision vector to per-stage blocks
        cols = np.zeros((H, per), dtype=np.int64)
        for t in range(H):
            zc = np.arange(t * K * K, (t + 1) * K * K)
            rc = self.nz + np.arange(t * K * (K - 1), (t + 1) * K * (K - 1))
            sc = self.nz + self.nr + np.arange(t * K, (t + 1) * K)
            cols[t] = np.concatenate([zc, rc, sc])
        S = np.zeros((X, self.size))
        c0 = x0.copy()
        rows_G, rows_h = [], []
        cost_grad = np.zeros(self.size)
        cost_const = 0.0
        cpm, N = net.cost_per_minute, net.fleet_size
        cap = net.parking_cap_at(self.t0)
        for k in range(H * n):
            t = k // n
            # left-Riemann cost on the parked stock at the start of the step
            cost_const += dt * cpm * (N - c0[ip:ip + K].sum())
            cost_grad += dt * cpm * S[ip:ip + K].sum(0)
            S = M @ S
            S[:, cols[t]] += Bs[t]
            c0 = M @ c0
            rows_G += [S[iv:iv + K], S[ip:ip + K], -S[ip:ip + K]]
            rows_h += [c0[iv:iv + K] - self.floor, c0[ip:ip + K], cap - c0[ip:ip + K]]
        self.G = np.vstack(rows_G)
        self.h0 = np.concatenate(rows_h)
        # profit = revenue(z) - cost_const + cost_grad @ x  (cost_grad holds d(-cost)/dx)
        self.cost_const = cost_const
        self.lin = cost_grad
        self.final_map = (S, c0)
        w = np.broadcast_to(self.w_fixed[None, :, None], (H, K, K))
        self.w_od = w.ravel()
        self.weight = (net.control_period * self.demand).ravel()   # base trips per period per OD

    # -- objective ---------------------------------------------------------------
    def split(self, x):
        x = np.asarray(x, float)
        H, K = self.H, self.K
        z = x[:self.nz].reshape(H, K, K)
        r = np.zeros((H, K, K))
        r[:, self.off] = x[self.nz:self.nz + self.nr].reshape(H, K * (K - 1))
        s = x[self.nz + self.nr:].reshape(H, K)
        return z, r, s

    def objective(self, x) -> float:
        x = np.asarray(x, float)
        z = x[:self.nz]
        rev = float((self.weight * share_revenue(z, self.w_od, self.behavior)).sum())
        return rev - self.cost_const + float(self.lin @ x)

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        z = np.maximum(x[:self.nz], Z_MIN)
        beh = self.behavior
        g = self.lin.copy()
        g[:self.nz] += self.weight * (-np.log(z) / beh.sensitivity - 1.0 / beh.sensitivity
                                      - beh.value_of_time * self.w_od)
        return g

    def constraints(self, x) -> np.ndarray:
        return self.G @ np.asarray(x, float) + self.h0

    def feasible_start(self) -> np.ndarray:
        """No trips, no moves: the fleet stays where it is."""
        x = np.zeros(self.size)
        x[:self.nz] = Z_MIN
        return np.clip(x, self.lower, self.upper)

    def dual_function(self, mu) -> float:
        """``max_box L(x, mu)``; an upper bound on the optimum for any ``mu >= 0``."""
        mu = np.asarray(mu, float)
        coef = self.lin + self.G.T @ mu
        beh = self.behavior
        # z: maximise weight * share_revenue(z) + coef * z over [lo, hi]
        a = coef[:self.nz]
        wt = self.weight
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            zs = np.exp(beh.sensitivity * (np.where(wt > 0, a / np.where(wt > 0, wt, 1.0), 0.0)
                                           - beh.value_of_time * self.w_od) - 1.0)
        zs = np.where(wt > 0, zs, np.where(a > 0, self.upper[:self.nz], self.lower[:self.nz]))
        zs = np.clip(zs, self.lower[:self.nz], self.upper[:self.nz])
        x = np.where(coef > 0, self.upper, self.lower)
        x[:self.nz] = zs
        rev = float((wt * share_revenue(zs, self.w_od, beh)).sum())
        return rev - self.cost_const + float(coef @ x) + float(mu @ self.h0)

    # -- conversion ----------------------------------------------------------------
    def to_actions(self, x) -> list[ControlAction]:
        """Origin prices as trip-weighted averages of the OD fares; moves as solved."""
        z, r, s = self.split(x)
        out = []
        tau = self.network.travel_time
        for t in range(self.H):
            zt = np.maximum(z[t], Z_MIN)
            fares = invert_demand(zt, self.w_fixed[:, None], tau, self.behavior, self.network.price_cap)
            wts = self.demand[t] * zt
            tot = wts.sum(1)
            p = np.where(tot > 0, (wts * fares).sum(1) / np.where(tot > 0, tot, 1.0), self.network.price_cap)
            out.append(ControlAction(p, r[t], s[t]))
        return out


@dataclass
class ConcaveResult:
    z: np.ndarray
    r: np.ndarray
    s: np.ndarray
    value: float
    dual_bound: float
    certified: bool
    iterations: int
    max_violation: float
    x: np.ndarray = None
    trace: list = field(default_factory=list)


def _project(x, lo, hi):
    return np.minimum(np.maximum(x, lo), hi)


def solve_concave(instance: ConcaveInstance, x0=None) -> ConcaveResult:
    """Maximise the concave objective subject to the state bounds; see the module docstring.

    Each augmented-Lagrangian subproblem is a smooth concave maximisation over
    the decision box, handled by bound-constrained L-BFGS.
    """
    inst = instance
    c = inst.config
    lo, hi = inst.lower, inst.upper
    # work in trips per minute rather than shares so every decision has the same units
    d = np.ones(inst.size)
    d[:inst.nz] = np.where(inst.weight > 0, inst.network.control_period / np.where(inst.weight > 0, inst.weight, 1.0), 1.0)
    bounds = list(zip(lo / d, hi / d))
    x = _project(inst.feasible_start() if x0 is None else np.asarray(x0, float), lo, hi)
    m = inst.G.shape[0]
    mu = np.zeros(m)
    rho = c.rho
    scale = max(1.0, float(np.abs(inst.weight).sum()), inst.cost_const)
    trace = []
    total = 0
    viol_prev = np.inf
    converged = False
    best_x, best_val = None, -np.inf

    def neg_merit(u):
        v = u * d
        h = inst.constraints(v)
        act = np.maximum(0.0, mu - rho * h)
        val = inst.objective(v) - (act ** 2 - mu ** 2).sum() / (2 * rho)
        grad = inst.gradient(v) + inst.G.T @ act
        return -val / scale, -grad * d / scale

    for outer in range(c.max_outer):
        res = minimize(neg_merit, x / d, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": c.max_inner, "ftol": 1e-15, "gtol": c.tol})
        total += int(res.nit)
        x = _project(res.x * d, lo, hi)
        h = inst.constraints(x)
        viol = float(np.maximum(-h, 0.0).max()) if m else 0.0
        obj = inst.objective(x)
        mu = np.maximum(0.0, mu - rho * h)
        kkt = float(np.abs(_project(x + (inst.gradient(x) + inst.G.T @ mu) / scale, lo, hi) - x).max())
        trace.append({"outer": outer, "inner": int(res.nit), "objective": obj, "max_violation": viol,
                      "rho": rho, "kkt": kkt})
        if viol <= c.feas_tol and obj > best_val:
            best_x, best_val = x.copy(), obj
        if viol <= c.feas_tol and kkt <= 10 * c.tol:
            converged = True
            break
        if viol > 0.25 * viol_prev:
            rho *= 4.0
        viol_prev = viol
    if best_x is None:
        best_x, best_val = x, inst.objective(x)
    dual = inst.dual_function(mu)
    h = inst.constraints(best_x)
    viol = float(np.maximum(-h, 0.0).max()) if m else 0.0
    certified = viol <= c.feas_tol and dual - best_val <= 1e-3 * max(abs(best_val), 1.0)
    if not certified:
        log.info("concave solve not certified: primal %.3f, dual %.3f", best_val, dual)
    z, r, s = inst.split(best_x)
    return ConcaveResult(z, r, s, best_val, dual, certified, total, viol, best_x, trace)
