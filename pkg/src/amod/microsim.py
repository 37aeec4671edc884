"""Agent-level plant: individual vehicles and passengers moving in planar zones.

Vehicles move in straight lines at constant speed.  Idle vehicles cruise
between random waypoints inside their zone, parked vehicles stay put.  Each
step runs spawn, dispatch, then advance (which includes cancellations).
Distances are kilometres, times inside the world are minutes.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import shapely
from scipy.stats import qmc
from shapely.geometry import Polygon, box

from .config import BehaviorParams, NetworkConfig
from .core import ControlAction, SystemState

log = logging.getLogger(__name__)

IDLE, MATCHED, OCCUPIED, RELOCATING, PARKED = range(5)
STATUS_NAMES = ("idle", "matched", "occupied", "relocating", "parked")
WAITING, R_MATCHED, RIDING, SERVED, CANCELED = range(5)


# ---------------------------------------------------------------------------
# geometry

@dataclass(frozen=True)
class ZoneGeometry:
    polygons: tuple
    speed: float  # km per minute

    def __post_init__(self):
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        polys = tuple(self.polygons)
        for k, p in enumerate(polys):
            if not p.is_valid or p.area <= 0:
                raise ValueError(f"zone {k + 1} polygon is degenerate")
        for a in range(len(polys)):
            for b in range(a + 1, len(polys)):
                if polys[a].intersection(polys[b]).area > 1e-9:
                    raise ValueError(f"zones {a + 1} and {b + 1} overlap")
        object.__setattr__(self, "polygons", polys)
        for p in polys:
            shapely.prepare(p)

    @property
    def zone_count(self) -> int:
        return len(self.polygons)

    @property
    def areas(self) -> np.ndarray:
        return np.array([p.area for p in self.polygons])

    @classmethod
    def strip(cls, heights=(4.0, 4.0, 3.5, 3.0, 3.0, 3.5), width: float = 3.6,
              speed: float = 0.25) -> "ZoneGeometry":
        """Rectangles stacked north to south; zone 1 is the northernmost."""
        top = float(sum(heights))
        polys = []
        for h in heights:
            polys.append(box(0.0, top - h, width, top))
            top -= h
        return cls(tuple(polys), speed)

    def sample(self, zone: int, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` points uniformly distributed in a zone (rejection from the bounding box)."""
        poly = self.polygons[zone]
        x0, y0, x1, y1 = poly.bounds
        out = np.empty((n, 2))
        filled = 0
        rect = abs(poly.area - (x1 - x0) * (y1 - y0)) < 1e-12
        while filled < n:
            need = n - filled
            pts = np.column_stack([rng.uniform(x0, x1, need), rng.uniform(y0, y1, need)])
            if not rect:
                pts = pts[shapely.contains_xy(poly, pts[:, 0], pts[:, 1])]
            out[filled:filled + len(pts)] = pts
            filled += len(pts)
        return out

    def zone_of(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        z = np.full(len(pts), -1)
        for k, p in enumerate(self.polygons):
            inside = shapely.intersects_xy(p, pts[:, 0], pts[:, 1])
            z = np.where((z < 0) & inside, k, z)
        return z

    def mean_distance(self, samples: int = 1 << 14, seed: int = 7) -> np.ndarray:
        """Mean straight-line distance between uniform points of two zones (quasi-Monte Carlo)."""
        K = self.zone_count
        u = qmc.Sobol(4, scramble=True, seed=seed).random(samples)
        pts = []
        for k, p in enumerate(self.polygons):
            x0, y0, x1, y1 = p.bounds
            if abs(p.area - (x1 - x0) * (y1 - y0)) > 1e-12:
                raise ValueError("quadrature supports rectangular zones only")
            pts.append((np.column_stack([x0 + u[:, 0] * (x1 - x0), y0 + u[:, 1] * (y1 - y0)]),
                        np.column_stack([x0 + u[:, 2] * (x1 - x0), y0 + u[:, 3] * (y1 - y0)])))
        d = np.zeros((K, K))
        for i in range(K):
            for j in range(K):
                d[i, j] = np.linalg.norm(pts[i][0] - pts[j][1], axis=1).mean()
        return d

    def travel_time(self) -> np.ndarray:
        return self.mean_distance() / self.speed

    def pickup_scale(self) -> np.ndarray:
        """Scale of the nearest-idle-vehicle pickup law ``w = n**-0.5 / beta``."""
        return 2.0 * self.speed / np.sqrt(self.areas)


# ---------------------------------------------------------------------------
# world

@dataclass
class SimConfig:
    step_seconds: float = 20.0
    tolerance_mean: float = 2.0    # minutes
    tolerance_std: float = 0.5
    reserve: float | None = None   # idle vehicles kept back from dispatch; defaults to the idle floor
    record_events: bool = False


class _Requests:
    """Column store for passenger requests."""

    cols = ("origin", "dest", "ox", "oy", "dx", "dy", "spawn", "tol", "state", "price", "fare",
            "matched_at", "picked_at", "vehicle")

    def __init__(self):
        self.n = 0
        cap = 1024
        self.data = {c: np.zeros(cap) for c in self.cols}

    def add(self, origin, dest, opos, dpos, spawn, tol, price, fare):
        m = len(origin)
        if self.n + m > len(self.data["origin"]):
            cap = max(2 * len(self.data["origin"]), self.n + m)
            for c in self.cols:
                grown = np.zeros(cap)
                grown[:self.n] = self.data[c][:self.n]
                self.data[c] = grown
        sl = slice(self.n, self.n + m)
        d = self.data
        d["origin"][sl], d["dest"][sl] = origin, dest
        d["ox"][sl], d["oy"][sl] = opos[:, 0], opos[:, 1]
        d["dx"][sl], d["dy"][sl] = dpos[:, 0], dpos[:, 1]
        d["spawn"][sl], d["tol"][sl] = spawn, tol
        d["state"][sl] = WAITING
        d["price"][sl], d["fare"][sl] = price, fare
        d["matched_at"][sl] = np.nan
        d["picked_at"][sl] = np.nan
        d["vehicle"][sl] = -1
        ids = np.arange(self.n, self.n + m)
        self.n += m
        return ids

    def __getitem__(self, col):
        return self.data[col][:self.n]


@dataclass
class StepLog:
    """Counts recorded for one simulation step (flows are per step, not per minute).

    ``waiting``, ``idle`` and ``occupied`` are taken at the start of the step.
    """

    time: float
    waiting: np.ndarray
    idle: np.ndarray
    spawned: np.ndarray
    matches: np.ndarray
    cancels: np.ndarray
    occupied: np.ndarray      # (K, K) before movement
    completions: np.ndarray   # (K, K)
    revenue: float
    cost: float


class World:
    """Vehicles, requests and the clock of one simulation run."""

    def __init__(self, network: NetworkConfig, behavior: BehaviorParams, geometry: ZoneGeometry,
                 seed: int = 0, config: SimConfig | None = None, initial: SystemState | None = None):
        if geometry.zone_count != network.zone_count:
            raise ValueError("geometry and network disagree on the number of zones")
        self.network, self.behavior, self.geometry = network, behavior, geometry
        self.config = config or SimConfig(step_seconds=network.step_seconds)
        self.dt = self.config.step_seconds / 60.0
        self.reserve = network.idle_floor if self.config.reserve is None else self.config.reserve
        self.rng = np.random.default_rng(seed)
        self.time = 0.0
        self.step_index = 0
        K, N = network.zone_count, int(round(network.fleet_size))
        self.K, self.N = K, N
        self.prices = np.zeros(K)
        self.requests = _Requests()
        self.waiting: list[list[int]] = [[] for _ in range(K)]
        self.pos = np.zeros((N, 2))
        self.dest = np.zeros((N, 2))
        self.status = np.full(N, PARKED, dtype=np.int8)
        self.zone = np.zeros(N, dtype=np.int64)    # zone the vehicle is in, or heading to
        self.origin = np.zeros(N, dtype=np.int64)  # zone a relocation started from
        self.req = np.full(N, -1, dtype=np.int64)
        self.revenue = 0.0
        self.cost = 0.0
        self.trips = 0
        self.slack: list[dict] = []
        self.logs: list[StepLog] = []
        self.events: list[tuple] = []
        # (pickup instant, origin zone, match-to-pickup minutes, request-to-pickup minutes)
        self.pickup_waits: list[tuple] = []
        self._carry_r = np.zeros((K, K))
        self._carry_s = np.zeros(K)
        self._place_fleet(initial or SystemState.initial(network))

    # -- setup -------------------------------------------------------------
    def _place_fleet(self, state: SystemState):
        """Distribute vehicles to match the idle and parked counts of ``state`` (other blocks must be empty)."""
        if state.Q_m.sum() or state.Q_b.sum() or state.N_r.sum() or state.Q_w.sum():
            raise ValueError("initial world must start without passengers or relocations")
        counts = np.concatenate([state.N_v, state.N_p])
        ints = _round_preserving(counts, self.N)
        k = 0
        for z in range(self.K):
            for status, n in ((IDLE, ints[z]), (PARKED, ints[self.K + z])):
                sl = slice(k, k + n)
                self.pos[sl] = self.geometry.sample(z, n, self.rng)
                self.status[sl] = status
                self.zone[sl] = z
                k += n
        idle = self.status == IDLE
        self._new_waypoints(np.flatnonzero(idle))

    def _new_waypoints(self, vids):
        for z in range(self.K):
            sel = vids[self.zone[vids] == z]
            if len(sel):
                self.dest[sel] = self.geometry.sample(z, len(sel), self.rng)

    # -- observation ---------------------------------------------------------
    def idle_counts(self) -> np.ndarray:
        return np.bincount(self.zone[self.status == IDLE], minlength=self.K).astype(float)

    def estimated_wait(self) -> np.ndarray:
        n = self.idle_counts()
        beta, theta = self.behavior.pickup_scale, self.behavior.pickup_exponent
        with np.errstate(divide="ignore"):
            return np.where(n > 0, np.power(np.maximum(n, 1.0), -theta) / beta, np.inf)

    def vehicle_counts(self) -> np.ndarray:
        return np.bincount(self.status, minlength=5)

    # -- step pieces -----------------------------------------------------------
    def spawn_demand(self, qbar) -> np.ndarray:
        """Poisson arrivals per OD pair given the current prices and pickup estimates."""
        qbar = np.asarray(qbar, float)
        what = self.estimated_wait()
        tau = self.network.travel_time
        eps, alpha = self.behavior.sensitivity, self.behavior.value_of_time
        with np.errstate(invalid="ignore", over="ignore"):
            expo = -eps * (alpha * what[:, None] + self.prices[:, None] * tau)
        rate = np.where(np.isfinite(expo), qbar * np.exp(np.where(np.isfinite(expo), expo, 0.0)), 0.0)
        counts = self.rng.poisson(rate * self.dt)
        self._spawn(counts)
        return counts

    def _spawn(self, counts):
        K = self.K
        m = int(counts.sum())
        if m == 0:
            return
        origin = np.repeat(np.arange(K), counts.sum(1))
        dest = np.concatenate([np.repeat(np.arange(K), counts[i]) for i in range(K)])
        opos = np.empty((m, 2))
        dpos = np.empty((m, 2))
        for i in range(K):
            sel = origin == i
            if sel.any():
                opos[sel] = self.geometry.sample(i, int(sel.sum()), self.rng)
        for j in range(K):
            sel = dest == j
            if sel.any():
                dpos[sel] = self.geometry.sample(j, int(sel.sum()), self.rng)
        tol = self._draw_tolerance(m)
        # arrivals within one step are interleaved in random order; request ids follow that order
        order = self.rng.permutation(m)
        origin, dest, opos, dpos, tol = origin[order], dest[order], opos[order], dpos[order], tol[order]
        price = self.prices[origin]
        fare = price * self.network.travel_time[origin, dest]
        ids = self.requests.add(origin, dest, opos, dpos, np.full(m, self.time), tol, price, fare)
        for rid, i in zip(ids, origin):
            self.waiting[i].append(int(rid))
            if self.config.record_events:
                self.events.append((self.time, "request", int(rid), -1, int(i)))

    def _draw_tolerance(self, m):
        tol = self.rng.normal(self.config.tolerance_mean, self.config.tolerance_std, m)
        bad = tol <= 0
        while np.any(bad):
            tol[bad] = self.rng.normal(self.config.tolerance_mean, self.config.tolerance_std, int(bad.sum()))
            bad = tol <= 0
        return tol

    def greedy_dispatch(self) -> np.ndarray:
        """Match waiting requests, oldest first, to the nearest idle vehicle in their zone."""
        K = self.K
        matches = np.zeros((K, K))
        R = self.requests
        queue = sorted(rid for z in range(K) for rid in self.waiting[z])  # ids follow arrival order
        if not queue:
            return matches
        idle_ids = [list(np.flatnonzero((self.status == IDLE) & (self.zone == z))) for z in range(K)]
        avail = [len(ids) - self.reserve for ids in idle_ids]
        pos_cache = {}
        matched = set()
        for rid in queue:
            z = int(R["origin"][rid])
            if avail[z] < 1 or not idle_ids[z]:
                continue
            if z not in pos_cache:
                pos_cache[z] = np.array(idle_ids[z])
            cands = pos_cache[z]
            d = np.hypot(self.pos[cands, 0] - R["ox"][rid], self.pos[cands, 1] - R["oy"][rid])
            k = int(np.argmin(d))
            vid = int(cands[k])
            pos_cache[z] = np.delete(cands, k)
            idle_ids[z] = list(pos_cache[z])
            avail[z] -= 1
            self._assign(vid, rid)
            matched.add(rid)
            matches[z, int(R["dest"][rid])] += 1
        if matched:
            for z in range(K):
                self.waiting[z] = [r for r in self.waiting[z] if r not in matched]
        return matches

    def _assign(self, vid, rid):
        R = self.requests.data
        self.status[vid] = MATCHED
        self.req[vid] = rid
        self.dest[vid] = (R["ox"][rid], R["oy"][rid])
        R["state"][rid] = R_MATCHED
        R["matched_at"][rid] = self.time
        R["vehicle"][rid] = vid
        self.revenue += R["fare"][rid]
        self.trips += 1
        if self.config.record_events:
            self.events.append((self.time, "match", int(rid), int(vid), int(self.zone[vid])))

    def advance(self, dt: float | None = None):
        """Move vehicles, resolve arrivals and cancel requests that ran out of patience."""
        dt = self.dt if dt is None else dt
        K = self.K
        completions = np.zeros((K, K))
        moving = self.status != PARKED
        idx = np.flatnonzero(moving)
        delta = self.dest[idx] - self.pos[idx]
        dist = np.hypot(delta[:, 0], delta[:, 1])
        reach = self.geometry.speed * dt
        arrive = dist <= reach
        frac = np.where(arrive, 1.0, reach / np.where(dist > 0, dist, 1.0))
        self.pos[idx] = self.pos[idx] + delta * frac[:, None]
        arrived = idx[arrive]
        t_end = self.time + dt
        R = self.requests.data
        cruising = []
        for vid in arrived:
            st = self.status[vid]
            if st == IDLE:
                cruising.append(vid)
            elif st == MATCHED:
                rid = self.req[vid]
                R["state"][rid] = RIDING
                R["picked_at"][rid] = t_end
                self.pickup_waits.append((t_end, int(R["origin"][rid]), t_end - R["matched_at"][rid],
                                          t_end - R["spawn"][rid]))
                self.status[vid] = OCCUPIED
                self.dest[vid] = (R["dx"][rid], R["dy"][rid])
                self.zone[vid] = int(R["dest"][rid])
                self.origin[vid] = int(R["origin"][rid])
                if self.config.record_events:
                    self.events.append((t_end, "pickup", int(rid), int(vid), int(R["origin"][rid])))
            elif st == OCCUPIED:
                rid = self.req[vid]
                R["state"][rid] = SERVED
                completions[int(R["origin"][rid]), int(R["dest"][rid])] += 1
                self.status[vid] = IDLE
                self.req[vid] = -1
                cruising.append(vid)
                if self.config.record_events:
                    self.events.append((t_end, "dropoff", int(rid), int(vid), int(R["dest"][rid])))
            elif st == RELOCATING:
                self.status[vid] = IDLE
                cruising.append(vid)
                if self.config.record_events:
                    self.events.append((t_end, "relocated", -1, int(vid), int(self.zone[vid])))
        if cruising:
            self._new_waypoints(np.array(cruising))
        cancels = np.zeros(K)
        spawn, tol = R["spawn"], R["tol"]
        for z in range(K):
            keep = []
            for rid in self.waiting[z]:
                if t_end - spawn[rid] > tol[rid]:
                    R["state"][rid] = CANCELED
                    cancels[z] += 1
                    if self.config.record_events:
                        self.events.append((t_end, "cancel", int(rid), -1, z))
                else:
                    keep.append(rid)
            self.waiting[z] = keep
        on_duty = self.N - int((self.status == PARKED).sum())
        step_cost = self.network.cost_per_minute * on_duty * dt
        self.cost += step_cost
        self.time = t_end
        self.step_index += 1
        return completions, cancels, step_cost

    def step(self, qbar) -> StepLog:
        K = self.K
        revenue0 = self.revenue
        # queue and idle stock as the step begins, the quantities the macroscopic rates act on
        waiting = np.array([len(w) for w in self.waiting], float)
        idle = self.idle_counts()
        occupied = self._occupied_matrix()
        spawned = self.spawn_demand(qbar)
        matches = self.greedy_dispatch()
        t = self.time
        completions, cancels, step_cost = self.advance()
        entry = StepLog(t, waiting, idle, spawned.sum(1), matches, cancels, occupied, completions,
                        self.revenue - revenue0, step_cost)
        self.logs.append(entry)
        return entry

    def _occupied_matrix(self):
        occ = self.status == OCCUPIED
        m = np.zeros((self.K, self.K))
        np.add.at(m, (self.origin[occ], self.zone[occ]), 1.0)
        return m

    # -- control -------------------------------------------------------------
    def apply_control(self, action: ControlAction, period: float | None = None):
        """Install prices and launch the period's relocations and parking moves.

        Vehicle counts are ``rate * period`` plus any fraction carried over from
        earlier periods, rounded down.  Requests that cannot be met are recorded
        in :attr:`slack`.
        """
        period = self.network.control_period if period is None else period
        K = self.K
        self.prices = np.clip(np.asarray(action.p, float), 0.0, None)
        r = np.asarray(action.r, float) * (1 - np.eye(K))
        want_r = np.maximum(r, 0.0) * period + self._carry_r
        n_r = np.floor(want_r + 1e-9)
        self._carry_r = want_r - n_r
        want_s = np.asarray(action.s, float) * period + self._carry_s
        n_s = np.trunc(want_s + np.sign(want_s) * 1e-9)
        self._carry_s = want_s - n_s
        cap = self.network.parking_cap_at(self.time)
        for i in range(K):
            idle = np.flatnonzero((self.status == IDLE) & (self.zone == i))
            spare = max(len(idle) - int(np.ceil(self.reserve - 1e-9)), 0)
            asked = n_r[i].sum()
            if asked > 0:
                give = min(int(asked), spare)
                if give < asked:
                    self.slack.append({"time": self.time, "zone": i, "kind": "rebalance",
                                       "requested": float(asked), "applied": float(give)})
                alloc = _round_preserving(n_r[i] * (give / asked), give) if give else np.zeros(K, int)
                chosen = self.rng.permutation(idle)[:give]
                k = 0
                for j in range(K):
                    for vid in chosen[k:k + alloc[j]]:
                        self.status[vid] = RELOCATING
                        self.origin[vid] = i
                        self.zone[vid] = j
                        if self.config.record_events:
                            self.events.append((self.time, "relocate", -1, int(vid), i))
                    if alloc[j]:
                        self.dest[chosen[k:k + alloc[j]]] = self.geometry.sample(j, int(alloc[j]), self.rng)
                    k += alloc[j]
                spare -= give
                idle = np.flatnonzero((self.status == IDLE) & (self.zone == i))
            parked_here = np.flatnonzero((self.status == PARKED) & (self.zone == i))
            if n_s[i] < 0:
                asked = int(-n_s[i])
                room = max(int(np.floor(cap[i] + 1e-9)) - len(parked_here), 0)
                give = min(asked, spare, room)
                if give < asked:
                    self.slack.append({"time": self.time, "zone": i, "kind": "park",
                                       "requested": float(asked), "applied": float(give)})
                for vid in self.rng.permutation(idle)[:give]:
                    self.status[vid] = PARKED
                    if self.config.record_events:
                        self.events.append((self.time, "park", -1, int(vid), i))
            elif n_s[i] > 0:
                asked = int(n_s[i])
                give = min(asked, len(parked_here))
                if give < asked:
                    self.slack.append({"time": self.time, "zone": i, "kind": "activate",
                                       "requested": float(asked), "applied": float(give)})
                woken = parked_here[:give]
                self.status[woken] = IDLE
                self._new_waypoints(woken)
                if self.config.record_events:
                    for vid in woken:
                        self.events.append((self.time, "activate", -1, int(vid), i))

    def observe_macro_state(self) -> SystemState:
        K = self.K
        st = self.status
        R = self.requests
        Q_w = np.array([len(w) for w in self.waiting], float)
        m = st == MATCHED
        Q_m = np.bincount(R["origin"][self.req[m]].astype(np.int64), minlength=K).astype(float)
        Q_b = self._occupied_matrix()
        N_v = np.bincount(self.zone[st == IDLE], minlength=K).astype(float)
        rel = st == RELOCATING
        N_r = np.zeros((K, K))
        np.add.at(N_r, (self.origin[rel], self.zone[rel]), 1.0)
        N_p = np.bincount(self.zone[st == PARKED], minlength=K).astype(float)
        return SystemState(Q_w, Q_m, Q_b, N_v, N_r, N_p)

    # -- output ----------------------------------------------------------------
    def write_events(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_min", "event", "request_id", "vehicle_id", "zone"])
            for t, kind, rid, vid, z in self.events:
                w.writerow([f"{t:.4f}", kind, rid, vid, z + 1])


def _round_preserving(values, total: int) -> np.ndarray:
    """Integers with the given total, as close as possible to ``values`` (largest remainder)."""
    values = np.asarray(values, float)
    if total == 0 or values.sum() <= 0:
        return np.zeros(values.shape, int)
    scaled = values * (total / values.sum())
    base = np.floor(scaled).astype(int)
    rest = total - base.sum()
    order = np.argsort(-(scaled - base), kind="stable")
    base[order[:rest]] += 1
    return base
