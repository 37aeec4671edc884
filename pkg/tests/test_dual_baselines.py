import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amod.baselines.concave import (ConcaveConfig, ConcaveInstance, fixed_waiting_time, invert_demand,
                                    solve_concave)
from amod.baselines.nlp import NlpInstance, solve_original_nlp
from amod.core import ControlAction, SystemState, simulate
from amod.dual import (DualConfig, DualDecomposition, FleetInfeasibleError, MultiplierTrajectory, project_fleet,
                       run_algorithm1, update_multipliers)
from amod.relaxed import relax_state, simulate_relaxed
from amod.zone_dp import ActionGrid

from conftest import make_behavior, make_network


def test_update_multipliers_examples():
    assert update_multipliers([0.05], [1000], 1e-5)[0] == pytest.approx(0.06)
    assert update_multipliers([0.05], [-10000], 1e-5)[0] == 0
    assert update_multipliers([0.0], [-3], 1e-5)[0] == 0


@settings(max_examples=500, deadline=None)
@given(lam=st.lists(st.floats(0, 10), min_size=1, max_size=6), v=st.floats(-1e6, 1e6), step=st.floats(1e-8, 1))
def test_multipliers_stay_nonnegative(lam, v, step):
    assert np.all(update_multipliers(lam, np.full(len(lam), v), step) >= 0)


def test_multiplier_warm_start_shift():
    assert MultiplierTrajectory([1.0, 2.0, 3.0]).shifted().values.tolist() == [2.0, 3.0, 3.0]
    with pytest.raises(ValueError):
        MultiplierTrajectory([-1.0])


def test_project_fleet_examples():
    np.testing.assert_allclose(project_fleet([30, 30], [30, 30], 100, 15), [20, 20])
    np.testing.assert_allclose(project_fleet([16, 44], [25, 25], 100, 15), [15, 35])
    np.testing.assert_array_equal(project_fleet([20, 20], [10, 10], 100, 15), [20, 20])
    with pytest.raises(FleetInfeasibleError):
        project_fleet([20, 20], [60, 60], 100, 15)


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_projection_feasible(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 7))
    idle = rng.uniform(15, 300, K)
    occ = rng.uniform(0, 200, K)
    N = float(occ.sum() + 15 * K + rng.uniform(0, idle.sum() - 15 * K))
    out = project_fleet(idle, occ, N, 15)
    assert out.sum() + occ.sum() <= N + 1e-9
    assert np.all(out >= 15 - 1e-12)


def tiny_city(K=2, fleet=600.0):
    tau = np.array([[4.0, 9.0], [9.0, 5.0]])[:K, :K]
    return make_network(K=K, fleet=fleet, tau=tau), make_behavior(K, cancel=(0.0, 0.2, -0.02))


def test_unconstrained_fleet_converges_immediately():
    net, beh = tiny_city(fleet=1e6)
    demand = np.full((2, 2, 2), 2.0)
    cfg = DualConfig(initial_multiplier=0.0, price_levels=4, idle_levels=4, grid_points=7)
    res = run_algorithm1(net, beh, demand, SystemState.initial(net, 20.0), cfg)
    assert res.converged and res.iterations == 1 and res.gap == 0.0
    # with lambda = 0 the bound is the sum of the zone optima
    dd = DualDecomposition(net, beh, demand, SystemState.initial(net, 20.0), cfg)
    assert dd.dual_iteration(np.zeros(2)).dual_value == pytest.approx(res.upper_bound)


def relaxed_brute_force(net, beh, demand, state, actions: ActionGrid):
    """Best relaxed profit over all stage-wise (price, idle) sequences that fit in the fleet."""
    H, K = demand.shape[0], net.zone_count
    per_zone = list(itertools.product(actions.prices, actions.idle))
    best = -np.inf
    for seq in itertools.product(itertools.product(per_zone, repeat=K), repeat=H):
        prices = np.array([[a[0] for a in stage] for stage in seq])
        idle = np.array([[a[1] for a in stage] for stage in seq])
        tr = simulate_relaxed(relax_state(state), prices, idle, demand, net, beh)
        if np.all(tr.on_duty.sum(1) / net.control_period <= net.fleet_size + 1e-9):
            best = max(best, tr.value(np.zeros(H), net.cost_per_minute))
    return best


def test_two_zone_bound_dominates_brute_force():
    net, beh = tiny_city(fleet=75.0)
    demand = np.array([[[3.0, 1.0], [0.5, 2.0]], [[1.0, 2.0], [2.0, 1.0]]])
    grid = ActionGrid(np.array([0.5, 2.0]), np.array([15.0, 40.0]))
    state = SystemState.initial(net, 20.0)
    cfg = DualConfig(max_iters=200, price_levels=2, idle_levels=2, grid_points=9)
    dd = DualDecomposition(net, beh, demand, state, cfg)
    for p in dd.problems:
        p.actions = grid
        p._tables = None
    res = dd.run()
    oracle = relaxed_brute_force(net, beh, demand, state, grid)
    assert res.upper_bound >= oracle - 1e-9
    assert res.primal_value <= res.upper_bound
    for row in res.gap_log:
        assert row["best_dual"] >= row["best_primal"]


def test_dual_deterministic():
    net, beh = tiny_city(fleet=120.0)
    demand = np.full((3, 2, 2), 3.0)
    cfg = DualConfig(max_iters=15, price_levels=4, idle_levels=4, grid_points=7)
    a = run_algorithm1(net, beh, demand, SystemState.initial(net, 30.0), cfg)
    b = run_algorithm1(net, beh, demand, SystemState.initial(net, 30.0), cfg)
    assert a.upper_bound == b.upper_bound and a.gap_log == b.gap_log
    np.testing.assert_array_equal(a.plan_idle, b.plan_idle)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_bound_above_random_feasible_controls(seed):
    rng = np.random.default_rng(seed)
    net, beh = tiny_city(fleet=300.0)
    demand = rng.uniform(0, 5, (2, 2, 2))
    state = SystemState.initial(net, rng.uniform(15, 80, 2))
    acts = [ControlAction(rng.uniform(0, 2.5, 2), rng.uniform(0, 1, (2, 2)), np.zeros(2)) for _ in range(2)]
    tr = simulate(state, acts, demand, net, beh, strict=False)
    if any(s.N_v.min() < net.idle_floor for s in tr.states):
        return
    cfg = DualConfig(max_iters=10, price_levels=5, idle_levels=5, grid_points=7)
    res = run_algorithm1(net, beh, demand, state, cfg)
    assert res.upper_bound >= tr.profit - 1e-6


# -- concave benchmark --------------------------------------------------------------

def test_invert_demand_examples():
    beh = make_behavior(1, eps=0.1, alpha=0.5)
    assert invert_demand(np.exp(-1.1), 2.0, 10.0, beh) == pytest.approx(1.0)
    assert invert_demand(np.exp(-0.1 * 0.5 * 2.0), 2.0, 10.0, beh) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        invert_demand(0.0, 2.0, 10.0, beh)


def test_fixed_waiting_time_examples():
    net = make_network(K=6, fleet=3000, tau=np.full((6, 6), 8.0))
    beh = make_behavior(6, beta=0.2, theta=0.5)
    np.testing.assert_allclose(fixed_waiting_time(net, beh, 1 / 3), 1 / (0.2 * np.sqrt(1000)))
    flat = make_behavior(6, beta=0.2, theta=1e-300)
    np.testing.assert_allclose(fixed_waiting_time(net, flat, 1.0), 5.0)


def concave_instance(seed=0, H=2):
    rng = np.random.default_rng(seed)
    net = make_network(K=3, fleet=900, tau=rng.uniform(3, 15, (3, 3)), floor=15)
    beh = make_behavior(3)
    state = SystemState.initial(net, rng.uniform(20, 120, 3))
    return ConcaveInstance(net, beh, rng.uniform(0.5, 6, (H, 3, 3)), state)


def random_point(inst, rng):
    return rng.uniform(inst.lower, np.minimum(inst.upper, inst.lower + 5.0))


def test_concave_gradient_matches_finite_differences():
    inst = concave_instance()
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = random_point(inst, rng)
        x[:inst.nz] = rng.uniform(0.05, inst.upper[:inst.nz])
        g = inst.gradient(x)
        for k in rng.choice(inst.size, 10, replace=False):
            h = 1e-6 * max(1.0, abs(x[k]))
            e = np.zeros(inst.size)
            e[k] = h
            fd = (inst.objective(x + e) - inst.objective(x - e)) / (2 * h)
            assert fd == pytest.approx(g[k], rel=1e-5, abs=1e-6)


def test_concave_midpoint():
    inst = concave_instance(2)
    rng = np.random.default_rng(4)
    for _ in range(200):
        a, b = random_point(inst, rng), random_point(inst, rng)
        assert inst.objective((a + b) / 2) >= (inst.objective(a) + inst.objective(b)) / 2 - 1e-9


def test_concave_dynamics_conserve_fleet():
    inst = concave_instance(3)
    rng = np.random.default_rng(5)
    S, c0 = inst.final_map
    for _ in range(20):
        x = random_point(inst, rng)
        assert (S @ x + c0).sum() == pytest.approx(inst.network.fleet_size, abs=1e-9)


def test_concave_solver_and_certificate():
    inst = concave_instance(6)
    res = solve_concave(inst)
    assert res.max_violation <= inst.config.feas_tol
    assert res.dual_bound >= res.value - 1e-6
    assert np.all(res.z >= 0) and np.all(res.z <= 1)
    # the dual function bounds every feasible point
    assert inst.dual_function(np.zeros(inst.G.shape[0])) >= res.value - 1e-6


def test_concave_zero_demand():
    net = make_network(K=2, fleet=300, floor=0.0)
    beh = make_behavior(2)
    parked = SystemState(np.zeros(2), np.zeros(2), np.zeros((2, 2)), np.zeros(2), np.zeros((2, 2)),
                         np.array([150.0, 150.0]))
    res = solve_concave(ConcaveInstance(net, beh, np.zeros((2, 2, 2)), parked))
    assert res.value == pytest.approx(0.0, abs=1e-6)


def test_concave_without_rebalancing():
    rng = np.random.default_rng(0)
    net = make_network(K=3, fleet=900, tau=rng.uniform(3, 15, (3, 3)))
    inst = ConcaveInstance(net, make_behavior(3), rng.uniform(0.5, 6, (2, 3, 3)), SystemState.initial(net, 50.0),
                           rebalancing=False)
    assert np.all(inst.upper[inst.nz:inst.nz + inst.nr] == 0)


# -- original problem --------------------------------------------------------------

def test_nlp_zero_demand_parks_everything():
    net = make_network(K=2, fleet=300, floor=0.0)
    beh = make_behavior(2)
    state = SystemState.initial(net, 60.0)
    res = solve_original_nlp(NlpInstance(net, beh, np.zeros((2, 2, 2)), state))
    assert res.feasible
    assert res.trajectory.final.N_p.sum() == pytest.approx(300, abs=1.0)
    assert res.profit > -(120 * net.cost_per_minute * 10)


def test_nlp_pricing_only_never_rebalances():
    rng = np.random.default_rng(1)
    net = make_network(K=2, fleet=600)
    inst = NlpInstance(net, make_behavior(2), rng.uniform(0, 5, (2, 2, 2)), SystemState.initial(net, 80.0),
                       mode="pricing_only")
    res = solve_original_nlp(inst)
    assert all(not np.any(a.r) for a in res.actions)
    for a in res.actions:
        assert np.all(a.p >= 0) and np.all(a.p <= net.price_cap)


def test_nlp_improves_on_default_guess():
    rng = np.random.default_rng(2)
    net = make_network(K=2, fleet=600)
    inst = NlpInstance(net, make_behavior(2), rng.uniform(1, 6, (3, 2, 2)), SystemState.initial(net, 80.0))
    base = simulate(inst.state, inst.default_guess(), inst.demand, net, inst.behavior).profit
    res = solve_original_nlp(inst)
    assert res.feasible and res.profit >= base - 1e-9
