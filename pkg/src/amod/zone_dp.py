"""Backward dynamic programming for the per-zone priced subproblem.

Each zone chooses a price and an idle-vehicle level per control period to
maximise revenue minus ``(cost + lambda_t)`` times its on-duty vehicle-minutes.

Two solution methods share one integration kernel:

``affine`` (default)
    The in-vehicle queues enter the dynamics linearly and never feed back into
    matching or pickup, so the value function is exactly
    ``W_t(Q_w, Q_m) - phi_intra_t * Q_intra - phi_inter_t * Q_inter``.  Only the
    two passenger-queue dimensions are gridded; the in-vehicle dimensions are
    carried in closed form.
``grid``
    Plain tensor grid over all four state dimensions with multilinear or
    nearest-point successor lookup.  Only practical for small grids; useful as
    a reference and for exhaustive checks.

Actions are flattened price-major (``a = price_index * n_idle + idle_index``)
and argmax ties resolve to the lowest index, i.e. lowest price, then lowest
idle level.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .config import BehaviorParams, NetworkConfig
from .relaxed import completion_fractions

log = logging.getLogger(__name__)

VALUEGRID_MAGIC = b"AMODVG01"


class GridTooSmallError(ValueError):
    def __init__(self, required):
        self.required = tuple(float(x) for x in required)
        super().__init__("initial state lies outside the value grid; required extents "
                         f"(waiting, matched, intra, inter) >= {self.required}")


# ---------------------------------------------------------------------------
# grids

@dataclass(frozen=True)
class ActionGrid:
    prices: np.ndarray
    idle: np.ndarray

    def __post_init__(self):
        for name in ("prices", "idle"):
            arr = np.asarray(getattr(self, name), float)
            if arr.ndim != 1 or arr.size == 0:
                raise ValueError(f"{name} levels must be a nonempty vector")
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return self.prices.size * self.idle.size

    def decode(self, a: int) -> tuple[float, float]:
        k, v = divmod(int(a), self.idle.size)
        return float(self.prices[k]), float(self.idle[v])

    @classmethod
    def default(cls, network: NetworkConfig, n_prices: int = 20, n_idle: int = 15,
                idle_max: float | None = None) -> "ActionGrid":
        lb = max(network.idle_floor, 1e-6)
        hi = network.fleet_size / 3.0 if idle_max is None else idle_max
        return cls(np.linspace(0.0, network.price_cap, n_prices), np.geomspace(lb, max(hi, lb), n_idle))


def power_axis(extent: float, points: int, power: float = 2.0) -> np.ndarray:
    """Axis on ``[0, extent]`` with spacing growing like ``k**power``."""
    u = np.linspace(0.0, 1.0, points)
    ax = extent * u ** power
    ax[-1] = extent
    return ax


@dataclass(frozen=True)
class StateAxes:
    waiting: np.ndarray
    matched: np.ndarray
    intra: np.ndarray | None = None  # only used by the tensor-grid method
    inter: np.ndarray | None = None

    def __post_init__(self):
        for name in ("waiting", "matched", "intra", "inter"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, float)
            if arr.ndim != 1 or arr.size < 2 or np.any(np.diff(arr) <= 0):
                raise ValueError(f"axis {name} must be strictly increasing with >= 2 points")
            object.__setattr__(self, name, arr)

    @classmethod
    def default(cls, peak_rate: float, horizon: float, initial=(0.0, 0.0, 0.0, 0.0),
                points: int = 15, margin: float = 1.5, power: float = 2.0, full: bool = False):
        """Axes spanning ``[0, peak_rate * horizon * margin]`` (at least the initial state)."""
        ext = max(peak_rate * horizon * margin, 1.0)
        w = power_axis(max(ext, initial[0] * margin), points, power)
        m = power_axis(max(ext, initial[1] * margin), points, power)
        if not full:
            return cls(w, m)
        a = power_axis(max(ext, initial[2] * margin), points, power)
        e = power_axis(max(ext, initial[3] * margin), points, power)
        return cls(w, m, a, e)


# ---------------------------------------------------------------------------
# integration kernel (one zone, one control period, many states x actions)

@njit(cache=True)
def _zone_kernel(Qw0, Qm0, Qa0, Qe0, D, tavg, fii, prices, g, pw, idle, lb, c0, c1, c2,
                 beta, dt, n, fa, fe, out):
    S = Qw0.shape[0]
    P = prices.shape[0]
    V = idle.shape[0]
    for s in range(S):
        for k in range(P):
            for v in range(V):
                qw = Qw0[s]
                qm = Qm0[s]
                qa = Qa0[s]
                qe = Qe0[s]
                nv = idle[v]
                arr = g[v] * D[k]
                has = arr > 0.0
                rev = 0.0
                on = 0.0
                for _ in range(n):
                    on += dt * (nv + qm + qa + qe)
                    M = 0.0
                    if has:
                        M = min(qw, max(nv - lb, 0.0))
                    C = min(qw, max(0.0, c0 + c1 * qw + c2 * nv))
                    tot = M + C
                    if tot * dt > qw:
                        sc = qw / (tot * dt)
                        M *= sc
                        C *= sc
                    B = 0.0
                    if has:
                        B = min(beta * qm * pw[v], qm / dt)
                    rev += dt * M * prices[k] * tavg[k]
                    nqw = qw + dt * (arr - M - C)
                    nqm = qm + dt * (M - B)
                    nqa = qa * (1.0 - fa) + dt * fii[k] * B
                    nqe = qe * (1.0 - fe) + dt * (1.0 - fii[k]) * B
                    qw = max(nqw, 0.0)
                    qm = max(nqm, 0.0)
                    qa = max(nqa, 0.0)
                    qe = max(nqe, 0.0)
                a = k * V + v
                out[0, s, a] = qw
                out[1, s, a] = qm
                out[2, s, a] = qa
                out[3, s, a] = qe
                out[4, s, a] = rev
                out[5, s, a] = on


class ZoneModel:
    """Zone-level constants shared by every solve within one horizon."""

    def __init__(self, network: NetworkConfig, behavior: BehaviorParams, demand, zone: int):
        demand = np.asarray(demand, float)
        self.network, self.behavior, self.zone = network, behavior, int(zone)
        self.demand = demand[:, zone, :]                # (H, K)
        self.tau = network.travel_time[zone]
        self.H = demand.shape[0]
        self.dt = network.dt
        self.n = network.steps_per_period
        fa, fe = completion_fractions(network, behavior)
        self.fa, self.fe = float(fa[zone]), float(fe[zone])
        self.beta = float(behavior.pickup_scale[zone])
        self.theta = float(behavior.pickup_exponent[zone])
        self.lb = float(network.idle_floor)
        self.rho_a = (1.0 - self.fa) ** self.n
        self.rho_e = (1.0 - self.fe) ** self.n
        # on-duty vehicle-minutes contributed by one in-vehicle passenger present at stage start
        self.sigma_a = float(sum(self.dt * (1.0 - self.fa) ** k for k in range(self.n)))
        self.sigma_e = float(sum(self.dt * (1.0 - self.fe) ** k for k in range(self.n)))
        self.cost = network.cost_per_minute

    def price_terms(self, stage: int, prices):
        prices = np.asarray(prices, float)
        eps = self.behavior.sensitivity
        weights = self.demand[stage][None, :] * np.exp(-eps * prices[:, None] * self.tau[None, :])
        D = weights.sum(1)
        safe = np.where(D > 0, D, 1.0)
        tavg = np.where(D > 0, (weights * self.tau).sum(1) / safe, 0.0)
        fii = np.where(D > 0, weights[:, self.zone] / safe, 0.0)
        return D, tavg, fii

    def idle_terms(self, idle):
        idle = np.asarray(idle, float)
        eps, alpha = self.behavior.sensitivity, self.behavior.value_of_time
        pos = idle > 0
        safe = np.where(pos, idle, 1.0)
        w = np.where(pos, safe ** (-self.theta) / self.beta, np.inf)
        g = np.where(pos, np.exp(-eps * alpha * np.where(pos, w, 0.0)), 0.0)
        return g, np.where(pos, safe ** self.theta, 0.0)

    def evaluate(self, stage: int, states, prices, idle, steps: int | None = None) -> np.ndarray:
        """Integrate one period from each state under every (price, idle) pair.

        ``states`` is ``(S, 4)``.  Returns ``(6, S, P*V)``: end-of-period waiting,
        matched, intra and inter queues, revenue and on-duty vehicle-minutes.
        """
        states = np.ascontiguousarray(np.atleast_2d(np.asarray(states, float)))
        prices = np.atleast_1d(np.asarray(prices, float))
        idle = np.atleast_1d(np.asarray(idle, float))
        D, tavg, fii = self.price_terms(stage, prices)
        g, pw = self.idle_terms(idle)
        c0, c1, c2 = self.behavior.cancel_coeffs
        out = np.empty((6, states.shape[0], prices.size * idle.size))
        _zone_kernel(np.ascontiguousarray(states[:, 0]), np.ascontiguousarray(states[:, 1]),
                     np.ascontiguousarray(states[:, 2]), np.ascontiguousarray(states[:, 3]),
                     D, tavg, fii, prices, g, pw, idle, self.lb, c0, c1, c2, self.beta,
                     self.dt, self.n if steps is None else steps, self.fa, self.fe, out)
        return out


def stage_reward(state, action, lam: float, qbar_row, zone: int, network: NetworkConfig,
                 behavior: BehaviorParams) -> float:
    """Revenue minus ``(cost + lam)``-weighted on-duty vehicle-minutes over one control period.

    ``state`` is ``(Q_w, Q_m, Q_intra, Q_inter)`` for the zone, ``action`` is
    ``(price, idle)`` and ``qbar_row`` the zone's base demand to every destination.
    """
    K = network.zone_count
    demand = np.zeros((1, K, K))
    demand[0, zone] = qbar_row
    model = ZoneModel(network, behavior, demand, zone)
    out = model.evaluate(0, np.asarray(state, float)[None, :], [action[0]], [action[1]])
    return float(out[4, 0, 0] - (model.cost + lam) * out[5, 0, 0])


# ---------------------------------------------------------------------------
# interpolation helpers

@njit(cache=True)
def _locate(axis, x):
    """Lower cell index and weight of the upper node; clamps outside the axis."""
    G = axis.shape[0]
    if x <= axis[0]:
        return 0, 0.0, x < axis[0]
    if x >= axis[G - 1]:
        return G - 2, 1.0, x > axis[G - 1]
    lo = 0
    hi = G - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if axis[mid] <= x:
            lo = mid
        else:
            hi = mid
    return lo, (x - axis[lo]) / (axis[lo + 1] - axis[lo]), False


@njit(cache=True)
def _bilinear_weights(ax_w, ax_m, sw, sm, idx, wts):
    S, A = sw.shape
    Gm = ax_m.shape[0]
    clamped = 0
    for s in range(S):
        for a in range(A):
            i, fx, cx = _locate(ax_w, sw[s, a])
            j, fy, cy = _locate(ax_m, sm[s, a])
            if cx or cy:
                clamped += 1
            idx[s, a] = i * Gm + j
            wts[0, s, a] = fx
            wts[1, s, a] = fy
    return clamped


@njit(cache=True)
def _bilinear(Wflat, Gm, base, fx, fy):
    v00 = Wflat[base]
    v01 = Wflat[base + 1]
    v10 = Wflat[base + Gm]
    v11 = Wflat[base + Gm + 1]
    # exact at nodes: a zero weight contributes an exact zero
    return (1.0 - fx) * ((1.0 - fy) * v00 + fy * v01) + fx * ((1.0 - fy) * v10 + fy * v11)


@njit(cache=True)
def _affine_backward(Wnext, Gm, idx, wts, R, O, Ain, Ein, c, phia, phie, Wout, arg):
    S, A = R.shape
    for s in range(S):
        best = -np.inf
        besta = 0
        for a in range(A):
            val = (R[s, a] - c * O[s, a] - phia * Ain[s, a] - phie * Ein[s, a]
                   + _bilinear(Wnext, Gm, idx[s, a], wts[0, s, a], wts[1, s, a]))
            if val > best:
                best = val
                besta = a
        Wout[s] = best
        arg[s] = besta


def bilinear_value(W, ax_w, ax_m, qw, qm) -> float:
    i, fx, _ = _locate(ax_w, float(qw))
    j, fy, _ = _locate(ax_m, float(qm))
    return float(_bilinear(np.ascontiguousarray(W).ravel(), ax_m.size, i * ax_m.size + j, fx, fy))


# ---------------------------------------------------------------------------
# value grid and policy

@dataclass(frozen=True)
class ValueGrid:
    """Value-to-go per stage; ``values[t]`` holds the gridded part at stage ``t``.

    For the affine method ``values`` has shape ``(H+1, Gw, Gm)`` and the
    in-vehicle dimensions contribute ``-phi[t, 0] * Q_intra - phi[t, 1] * Q_inter``.
    For the tensor-grid method ``values`` is ``(H+1, Gw, Gm, Ga, Ge)`` and ``phi`` is zero.
    """

    axes: StateAxes
    values: np.ndarray
    phi: np.ndarray
    method: str = "affine"

    @property
    def stages(self) -> int:
        return self.values.shape[0] - 1

    def value(self, stage: int, state) -> float:
        qw, qm, qa, qe = (float(x) for x in state)
        if self.method == "affine":
            base = bilinear_value(self.values[stage], self.axes.waiting, self.axes.matched, qw, qm)
            return base - self.phi[stage, 0] * qa - self.phi[stage, 1] * qe
        return float(_multilinear(self.values[stage], _full_axes(self.axes), np.array([[qw, qm, qa, qe]]))[0])

    def dump(self, path) -> None:
        """Binary dump: magic, method, axis lengths, axes, phi and row-major values (float64 LE)."""
        axes = _full_axes(self.axes) if self.method == "grid" else [self.axes.waiting, self.axes.matched]
        with open(path, "wb") as fh:
            fh.write(VALUEGRID_MAGIC)
            fh.write(np.array([0 if self.method == "affine" else 1, self.values.shape[0], len(axes)],
                              "<i8").tobytes())
            fh.write(np.array([a.size for a in axes], "<i8").tobytes())
            for a in axes:
                fh.write(a.astype("<f8").tobytes())
            fh.write(self.phi.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(self.values).astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ValueGrid":
        with open(path, "rb") as fh:
            if fh.read(8) != VALUEGRID_MAGIC:
                raise ValueError("not a value-grid dump")
            method, nstage, naxes = np.frombuffer(fh.read(24), "<i8")
            sizes = np.frombuffer(fh.read(8 * naxes), "<i8")
            axes = [np.frombuffer(fh.read(8 * int(n)), "<f8").copy() for n in sizes]
            phi = np.frombuffer(fh.read(16 * int(nstage)), "<f8").reshape(int(nstage), 2).copy()
            values = np.frombuffer(fh.read(), "<f8").reshape((int(nstage), *map(int, sizes))).copy()
        return cls(StateAxes(*axes), values, phi, "affine" if method == 0 else "grid")


@dataclass
class ZonePolicy:
    """Greedy actions per stage and grid node, with the data needed to roll out."""

    problem: "ZoneProblem"
    lam: np.ndarray
    grid: ValueGrid
    argmax: np.ndarray  # (H, *grid shape) flattened action index

    @property
    def stages(self) -> int:
        return self.argmax.shape[0]

    def action_at(self, stage: int, node) -> tuple[float, float]:
        return self.problem.actions.decode(self.argmax[stage][tuple(node)])


def _full_axes(axes: StateAxes):
    return [axes.waiting, axes.matched, axes.intra, axes.inter]


def _multilinear(values, axes, pts):
    """Multilinear interpolation on a tensor grid with clamping; exact on grid nodes."""
    pts = np.asarray(pts, float)
    d = len(axes)
    lo_idx, frac = [], []
    for k, ax in enumerate(axes):
        x = np.clip(pts[:, k], ax[0], ax[-1])
        i = np.clip(np.searchsorted(ax, x, side="right") - 1, 0, ax.size - 2)
        f = (x - ax[i]) / (ax[i + 1] - ax[i])
        lo_idx.append(i)
        frac.append(f)
    out = np.zeros(pts.shape[0])
    for corner in range(1 << d):
        w = np.ones(pts.shape[0])
        idx = []
        for k in range(d):
            bit = (corner >> k) & 1
            w = w * (frac[k] if bit else 1.0 - frac[k])
            idx.append(lo_idx[k] + bit)
        contrib = w * values[tuple(idx)]
        # skip exact-zero weights so infinities never leak and node values stay bit-exact
        out = out + np.where(w != 0.0, contrib, 0.0)
    return out


def _nearest_index(axes, pts):
    idx = []
    for k, ax in enumerate(axes):
        x = pts[:, k]
        i = np.clip(np.searchsorted(ax, x), 1, ax.size - 1)
        left = ax[i - 1]
        right = ax[i]
        idx.append(np.where(x - left <= right - x, i - 1, i))
    return tuple(idx)


# ---------------------------------------------------------------------------
# subproblem

class ZoneProblem:
    """Per-zone subproblem over a horizon of ``H`` control periods.

    Everything that does not depend on the multipliers (period integrals from
    every grid node under every action, successor interpolation weights) is
    computed once and reused by every :func:`solve_subproblem` call.
    """

    def __init__(self, network: NetworkConfig, behavior: BehaviorParams, demand, zone: int,
                 initial=(0.0, 0.0, 0.0, 0.0), axes: StateAxes | None = None,
                 actions: ActionGrid | None = None, method: str = "affine",
                 interpolation: str = "multilinear", points: int = 15, grid_power: float = 2.0):
        if method not in ("affine", "grid"):
            raise ValueError("method must be 'affine' or 'grid'")
        if interpolation not in ("multilinear", "nearest"):
            raise ValueError("interpolation must be 'multilinear' or 'nearest'")
        if method == "affine" and interpolation != "multilinear":
            raise ValueError("the affine method only supports multilinear interpolation")
        self.model = ZoneModel(network, behavior, demand, zone)
        self.network, self.behavior, self.zone = network, behavior, int(zone)
        self.H = self.model.H
        self.method, self.interpolation = method, interpolation
        self.actions = actions or ActionGrid.default(network)
        initial = tuple(float(x) for x in initial)
        if axes is None:
            peak = float(self.model.demand.sum(1).max()) if self.H else 0.0
            axes = StateAxes.default(peak, self.H * network.control_period, initial, points,
                                     power=grid_power, full=(method == "grid"))
        else:
            need = [initial[0], initial[1]] + ([initial[2], initial[3]] if method == "grid" else [])
            have = [axes.waiting[-1], axes.matched[-1]] + (
                [axes.intra[-1], axes.inter[-1]] if method == "grid" else [])
            if any(n > h for n, h in zip(need, have)):
                raise GridTooSmallError(np.maximum(need + [0.0] * (4 - len(need)),
                                                   have + [0.0] * (4 - len(have))))
            if method == "grid" and (axes.intra is None or axes.inter is None):
                raise ValueError("the tensor-grid method needs all four axes")
        self.axes = axes
        self._tables = None

    # -- tables ------------------------------------------------------------
    def nodes(self) -> np.ndarray:
        if self.method == "affine":
            w, m = np.meshgrid(self.axes.waiting, self.axes.matched, indexing="ij")
            z = np.zeros(w.size)
            return np.stack([w.ravel(), m.ravel(), z, z], axis=1)
        grids = np.meshgrid(*_full_axes(self.axes), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    @property
    def grid_shape(self) -> tuple:
        if self.method == "affine":
            return (self.axes.waiting.size, self.axes.matched.size)
        return tuple(a.size for a in _full_axes(self.axes))

    def tables(self):
        if self._tables is None:
            nodes = self.nodes()
            per_stage = []
            clamped = 0
            for t in range(self.H):
                out = self.model.evaluate(t, nodes, self.actions.prices, self.actions.idle)
                if self.method == "affine":
                    S, A = out.shape[1], out.shape[2]
                    idx = np.empty((S, A), np.int64)
                    wts = np.empty((2, S, A))
                    clamped += _bilinear_weights(self.axes.waiting, self.axes.matched,
                                                 np.ascontiguousarray(out[0]), np.ascontiguousarray(out[1]),
                                                 idx, wts)
                    per_stage.append((np.ascontiguousarray(out[4]), np.ascontiguousarray(out[5]),
                                      np.ascontiguousarray(out[2]), np.ascontiguousarray(out[3]), idx, wts))
                else:
                    succ = np.moveaxis(out[:4], 0, -1).reshape(-1, 4)
                    axes = _full_axes(self.axes)
                    hi = np.array([a[-1] for a in axes])
                    clamped += int(np.any(succ > hi, axis=1).sum())
                    if self.interpolation == "nearest":
                        link = np.ravel_multi_index(_nearest_index(axes, succ), self.grid_shape)
                        link = link.reshape(out.shape[1], out.shape[2])
                    else:
                        link = succ.reshape(out.shape[1], out.shape[2], 4)
                    per_stage.append((out[4], out[5], link))
            if clamped:
                log.warning("zone %d: %d successor states clamped to the value-grid hull",
                            self.zone + 1, clamped)
            self.clamped = clamped
            self._tables = per_stage
        return self._tables

    def phi(self, lam) -> np.ndarray:
        lam = np.asarray(lam, float)
        phi = np.zeros((self.H + 1, 2))
        m = self.model
        for t in range(self.H - 1, -1, -1):
            c = m.cost + lam[t]
            phi[t, 0] = c * m.sigma_a + m.rho_a * phi[t + 1, 0]
            phi[t, 1] = c * m.sigma_e + m.rho_e * phi[t + 1, 1]
        return phi


def solve_subproblem(problem: ZoneProblem, lam, initial=None):
    """Backward recursion; returns ``(ZonePolicy, value at the initial state)``.

    The value at the initial state is obtained by an exact one-period lookahead
    from that state onto the stage-1 value grid.
    """
    lam = np.asarray(lam, float)
    if lam.shape != (problem.H,):
        raise ValueError(f"need one multiplier per stage ({problem.H})")
    if np.any(lam < 0):
        raise ValueError("multipliers must be nonnegative")
    H = problem.H
    shape = problem.grid_shape
    if H == 0:
        grid = ValueGrid(problem.axes, np.zeros((1, *shape)), np.zeros((1, 2)), problem.method)
        return ZonePolicy(problem, lam, grid, np.zeros((0, *shape), np.int64)), 0.0
    tables = problem.tables()
    cost = problem.model.cost
    S = int(np.prod(shape))
    W = np.zeros((H + 1, S))
    arg = np.zeros((H, S), np.int64)
    if problem.method == "affine":
        phi = problem.phi(lam)
        Gm = shape[1]
        for t in range(H - 1, -1, -1):
            R, O, Ain, Ein, idx, wts = tables[t]
            _affine_backward(W[t + 1], Gm, idx, wts, R, O, Ain, Ein, cost + lam[t],
                             phi[t + 1, 0], phi[t + 1, 1], W[t], arg[t])
    else:
        phi = np.zeros((H + 1, 2))
        axes = _full_axes(problem.axes)
        for t in range(H - 1, -1, -1):
            R, O, link = tables[t]
            if problem.interpolation == "nearest":
                nxt = W[t + 1][link]
            else:
                nxt = _multilinear(W[t + 1].reshape(shape), axes, link.reshape(-1, 4)).reshape(R.shape)
            val = (R - (cost + lam[t]) * O) + nxt
            arg[t] = np.argmax(val, axis=1)
            W[t] = val[np.arange(S), arg[t]]
    grid = ValueGrid(problem.axes, W.reshape((H + 1, *shape)), phi, problem.method)
    policy = ZonePolicy(problem, lam, grid, arg.reshape((H, *shape)))
    if initial is None:
        return policy, 0.0
    _, value, _ = _lookahead(policy, 0, np.asarray(initial, float))
    return policy, value


def _lookahead(policy: ZonePolicy, stage: int, state):
    """Best action from an arbitrary state: returns ``(action index, value, period integrals)``."""
    prob = policy.problem
    out = prob.model.evaluate(stage, state[None, :], prob.actions.prices, prob.actions.idle)[:, 0, :]
    c = prob.model.cost + policy.lam[stage]
    grid = policy.grid
    if grid.method == "affine":
        nxt = np.array([bilinear_value(grid.values[stage + 1], grid.axes.waiting, grid.axes.matched,
                                       out[0, a], out[1, a]) for a in range(out.shape[1])])
        nxt = nxt - grid.phi[stage + 1, 0] * out[2] - grid.phi[stage + 1, 1] * out[3]
    elif prob.interpolation == "nearest":
        link = np.ravel_multi_index(_nearest_index(_full_axes(grid.axes), out[:4].T), prob.grid_shape)
        nxt = grid.values[stage + 1].ravel()[link]
    else:
        nxt = _multilinear(grid.values[stage + 1], _full_axes(grid.axes), out[:4].T)
    val = (out[4] - c * out[5]) + nxt
    a = int(np.argmax(val))
    return a, float(val[a]), out[:, a]


@dataclass
class Rollout:
    prices: np.ndarray   # (H,)
    idle: np.ndarray     # (H,)
    states: np.ndarray   # (H+1, 4)
    revenue: np.ndarray  # (H,)
    on_duty: np.ndarray  # (H,) vehicle-minutes
    value: float


def rollout_policy(policy: ZonePolicy, initial) -> Rollout:
    """Apply the greedy (one-period lookahead) action stage by stage from ``initial``.

    The reported value is the sum of the realised stage rewards.
    """
    H = policy.stages
    x = np.asarray(initial, float)
    states = [x]
    prices, idle, rev, on = np.zeros(H), np.zeros(H), np.zeros(H), np.zeros(H)
    total = 0.0
    for t in range(H):
        a, _, integ = _lookahead(policy, t, x)
        prices[t], idle[t] = policy.problem.actions.decode(a)
        rev[t], on[t] = integ[4], integ[5]
        total += rev[t] - (policy.problem.model.cost + policy.lam[t]) * on[t]
        x = integ[:4].copy()
        states.append(x)
    return Rollout(prices, idle, np.array(states), rev, on, float(total))


def evaluate_zone_plan(problem: ZoneProblem, initial, prices, idle) -> Rollout:
    """Integrate a zone under a fixed plan (one price and idle level per stage, or per step).

    Multiplier-free: the returned ``value`` uses zero multipliers.
    """
    m = problem.model
    prices = np.asarray(prices, float)
    idle = np.asarray(idle, float)
    x = np.asarray(initial, float)
    H = problem.H
    states = [x]
    rev, on = np.zeros(H), np.zeros(H)
    for t in range(H):
        if prices.ndim == 1:
            out = m.evaluate(t, x[None, :], prices[t:t + 1], idle[t:t + 1])[:, 0, 0]
            rev[t], on[t] = out[4], out[5]
            x = out[:4].copy()
        else:
            for k in range(m.n):
                sub = _one_step(m, t, x, prices[t, k], idle[t, k])
                rev[t] += sub[4]
                on[t] += sub[5]
                x = sub[:4]
        states.append(x)
    value = float((rev - m.cost * on).sum())
    p_out = prices if prices.ndim == 1 else prices.mean(axis=1)
    v_out = idle if idle.ndim == 1 else idle.mean(axis=1)
    return Rollout(p_out, v_out, np.array(states), rev, on, value)


def _one_step(model: ZoneModel, stage, x, price, idle):
    return model.evaluate(stage, x[None, :], [price], [idle], steps=1)[:, 0, 0]
