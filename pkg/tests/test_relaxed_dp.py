import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amod.core import ControlAction, SystemState, simulate
from amod.relaxed import (RelaxedAction, RelaxedState, on_duty_count, relax_state, relaxed_completion,
                          simulate_relaxed, step_relaxed)
from amod.zone_dp import (ActionGrid, GridTooSmallError, StateAxes, ValueGrid, ZoneProblem, evaluate_zone_plan,
                          rollout_policy, solve_subproblem, stage_reward)

from conftest import make_behavior, make_network


def test_relax_state_row_split():
    s = SystemState.empty(3)
    assert relax_state(s).Q_intra.sum() == 0 and relax_state(s).Q_inter.sum() == 0
    Q_b = np.zeros((3, 3))
    Q_b[1] = [4, 3, 2]
    s = SystemState(np.zeros(3), np.zeros(3), Q_b, np.zeros(3), np.zeros((3, 3)), np.zeros(3))
    r = relax_state(s)
    assert r.Q_intra[1] == 3 and r.Q_inter[1] == 6
    Q_b = np.zeros((3, 3))
    Q_b[0] = [4, 3, 2]
    r = relax_state(SystemState(np.zeros(3), np.zeros(3), Q_b, np.zeros(3), np.zeros((3, 3)), np.zeros(3)))
    assert r.Q_intra[0] == 4 and r.Q_inter[0] == 5


def test_relaxed_completion_examples():
    s = RelaxedState(np.zeros(1), np.zeros(1), np.array([10.0]), np.array([20.0]))
    a, e = relaxed_completion(s, 5.0, 10.0, 1.0)
    assert a[0] == pytest.approx(2) and e[0] == pytest.approx(2)
    a, e = relaxed_completion(RelaxedState.zeros(2), np.ones(2), np.ones(2), 1.0)
    assert not a.any() and not e.any()


def test_on_duty_examples():
    assert on_duty_count(RelaxedState.zeros(6), RelaxedAction(np.zeros(6), np.full(6, 15.0))) == 90
    s = RelaxedState(np.zeros(1), np.array([10.0]), np.array([5.0]), np.array([20.0]))
    assert on_duty_count(s, RelaxedAction(np.zeros(1), np.array([100.0]))) == 135


def test_relaxed_fixed_point():
    net, beh = make_network(), make_behavior()
    s = RelaxedState.zeros(2)
    out = step_relaxed(s, RelaxedAction(np.zeros(2), np.full(2, 20.0)), np.zeros((2, 2)), net, beh)
    assert out.stacked().sum() == 0


def test_stage_reward_pure_penalty():
    net, beh = make_network(K=6, fleet=3000, tau=np.full((6, 6), 8.0)), make_behavior(K=6)
    val = stage_reward((0, 0, 0, 0), (1.0, 15.0), 0.05, np.zeros(6), 0, net, beh)
    assert val == pytest.approx(-(10 / 60 + 0.05) * 15 * 5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_aggregation_dominance(seed):
    """Shorter outbound trips in the relaxation never leave more riders on board."""
    rng = np.random.default_rng(seed)
    K = 3
    tau = rng.uniform(3, 20, (K, K))
    net, beh = make_network(K=K, fleet=2000, tau=tau), make_behavior(K)
    demand = rng.uniform(0, 8, (2, K, K))
    s0 = SystemState.initial(net, rng.uniform(30, 200, K))
    acts = [ControlAction(rng.uniform(0, 2.5, K), np.zeros((K, K)), np.zeros(K)) for _ in range(2)]
    full = simulate(s0, acts, demand, net, beh)
    n = net.steps_per_period
    idle = np.array([s.N_v for s in full.states[:-1]]).reshape(2, n, K)
    prices = np.array([a.p for a in full.actions]).reshape(2, n, K)
    rel = simulate_relaxed(relax_state(s0), prices, idle, demand, net, beh)
    for k, rs in enumerate(rel.states):
        fs = full.states[k * n]
        assert np.all(fs.Q_b.sum(1) >= rs.Q_intra + rs.Q_inter - 1e-9)
        np.testing.assert_allclose(rs.Q_w, fs.Q_w, atol=1e-9)


def test_zone_kernel_matches_relaxed_simulation():
    rng = np.random.default_rng(3)
    K = 3
    net, beh = make_network(K=K, fleet=2000, tau=rng.uniform(3, 20, (K, K))), make_behavior(K)
    demand = rng.uniform(0, 8, (3, K, K))
    prices, idle = rng.uniform(0, 2.5, (3, K)), rng.uniform(15, 100, (3, K))
    init = RelaxedState(rng.uniform(0, 20, K), rng.uniform(0, 20, K), rng.uniform(0, 20, K), rng.uniform(0, 20, K))
    rel = simulate_relaxed(init, prices, idle, demand, net, beh)
    for i in range(K):
        prob = ZoneProblem(net, beh, demand, i, init.zone(i))
        ro = evaluate_zone_plan(prob, init.zone(i), prices[:, i], idle[:, i])
        np.testing.assert_allclose(ro.revenue, rel.revenue[:, i], rtol=1e-10)
        np.testing.assert_allclose(ro.on_duty, rel.on_duty[:, i], rtol=1e-10)
        np.testing.assert_allclose(ro.states[-1], rel.states[-1].stacked()[i], atol=1e-9)


# -- exhaustive oracle ------------------------------------------------------------

def enumerate_optimum(prob: ZoneProblem, lam, node):
    """Best total over every action sequence, with successors snapped to the nearest grid node."""
    axes = [prob.axes.waiting, prob.axes.matched, prob.axes.intra, prob.axes.inter]
    A = prob.actions.size
    c = prob.model.cost

    def snap(x):
        return np.array([ax[np.argmin(np.abs(ax - v))] for ax, v in zip(axes, x)])

    best = -np.inf
    for seq in itertools.product(range(A), repeat=prob.H):
        x = np.asarray(node, float)
        rewards = []
        for t, a in enumerate(seq):
            out = prob.model.evaluate(t, x[None, :], prob.actions.prices, prob.actions.idle)[:, 0, a]
            rewards.append(out[4] - (c + lam[t]) * out[5])
            x = snap(out[:4])
        total = 0.0
        for r in reversed(rewards):
            total = r + total
        best = max(best, total)
    return best


def tiny_problem(rng, H, n_prices=None, n_idle=None):
    net = make_network(K=2, fleet=600, tau=rng.uniform(3, 15, (2, 2)))
    beh = make_behavior(2, cancel=(rng.uniform(-1, 1), rng.uniform(0.05, 0.3), -rng.uniform(0.01, 0.1)))
    demand = rng.uniform(0, 6, (H, 2, 2))
    P = n_prices or int(rng.integers(2, 5))
    V = n_idle or int(rng.integers(2, 5))
    actions = ActionGrid(np.sort(rng.uniform(0, 2.5, P)), np.sort(rng.uniform(15, 80, V)))
    ax = lambda: np.array([0.0, 10.0, 30.0])
    axes = StateAxes(ax(), ax(), ax(), ax())
    prob = ZoneProblem(net, beh, demand, 0, axes=axes, actions=actions, method="grid", interpolation="nearest")
    node = [axes.waiting[rng.integers(3)], axes.matched[rng.integers(3)], axes.intra[rng.integers(3)],
            axes.inter[rng.integers(3)]]
    return prob, node


def test_dp_equals_enumeration_example():
    rng = np.random.default_rng(11)
    prob, node = tiny_problem(rng, 2, 3, 3)
    lam = np.array([0.05, 0.02])
    _, v = solve_subproblem(prob, lam, node)
    assert v == enumerate_optimum(prob, lam, node)


def test_zero_horizon():
    net, beh = make_network(), make_behavior()
    prob = ZoneProblem(net, beh, np.zeros((0, 2, 2)), 0)
    policy, v = solve_subproblem(prob, np.zeros(0), (0, 0, 0, 0))
    assert v == 0 and policy.stages == 0


def test_large_multiplier_pins_idle_at_floor():
    rng = np.random.default_rng(5)
    prob, node = tiny_problem(rng, 3, 3, 4)
    prob.actions = ActionGrid(prob.actions.prices, np.array([15.0, 40.0, 70.0]))
    policy, _ = solve_subproblem(prob, np.full(3, 1e6), node)
    ro = rollout_policy(policy, node)
    assert np.all(ro.idle == 15.0)


def test_zero_demand_parks_everything():
    net, beh = make_network(), make_behavior()
    prob = ZoneProblem(net, beh, np.zeros((3, 2, 2)), 1)
    policy, v = solve_subproblem(prob, np.full(3, 0.05), (0, 0, 0, 0))
    ro = rollout_policy(policy, (0, 0, 0, 0))
    assert np.all(ro.idle == net.idle_floor)
    assert v == pytest.approx(-(net.cost_per_minute + 0.05) * 15 * 15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_value_monotone_in_multiplier(seed):
    rng = np.random.default_rng(seed)
    net = make_network(K=2, fleet=600, tau=rng.uniform(3, 15, (2, 2)))
    beh = make_behavior(2)
    demand = rng.uniform(0, 6, (3, 2, 2))
    prob = ZoneProblem(net, beh, demand, 0, actions=ActionGrid.default(net, 5, 5), points=7)
    lam = rng.uniform(0, 0.2, 3)
    lam2 = lam + rng.uniform(0, 0.2, 3)
    _, v1 = solve_subproblem(prob, lam, (2.0, 1.0, 0.0, 0.0))
    _, v2 = solve_subproblem(prob, lam2, (2.0, 1.0, 0.0, 0.0))
    assert v2 <= v1 + 1e-9
    cap = net.price_cap * net.travel_time.max() * demand[:, 0].sum() * net.control_period
    assert v1 <= cap


def test_grid_values_are_exact_at_nodes(tmp_path):
    rng = np.random.default_rng(2)
    net, beh = make_network(K=2, fleet=600), make_behavior(2)
    prob = ZoneProblem(net, beh, rng.uniform(0, 6, (3, 2, 2)), 0, actions=ActionGrid.default(net, 4, 4),
                       points=6)
    policy, _ = solve_subproblem(prob, np.full(3, 0.05))
    g = policy.grid
    for i in range(g.values.shape[1]):
        for j in range(g.values.shape[2]):
            assert g.value(1, (g.axes.waiting[i], g.axes.matched[j], 0, 0)) == g.values[1, i, j]
    g.dump(tmp_path / "vg.bin")
    back = ValueGrid.load(tmp_path / "vg.bin")
    np.testing.assert_array_equal(back.values, g.values)
    np.testing.assert_array_equal(back.phi, g.phi)


def test_grid_too_small():
    net, beh = make_network(), make_behavior()
    axes = StateAxes(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    with pytest.raises(GridTooSmallError):
        ZoneProblem(net, beh, np.zeros((1, 2, 2)), 0, initial=(5.0, 0, 0, 0), axes=axes)


def test_affine_matches_tensor_grid_on_in_vehicle_terms():
    """The in-vehicle dimensions enter the value linearly: shifting them moves the value by phi."""
    rng = np.random.default_rng(8)
    net, beh = make_network(K=2, fleet=600), make_behavior(2)
    prob = ZoneProblem(net, beh, rng.uniform(0, 6, (3, 2, 2)), 0, actions=ActionGrid.default(net, 4, 4), points=6)
    lam = np.full(3, 0.03)
    _, v0 = solve_subproblem(prob, lam, (3.0, 2.0, 0.0, 0.0))
    _, v1 = solve_subproblem(prob, lam, (3.0, 2.0, 4.0, 7.0))
    phi = prob.phi(lam)
    assert v0 - v1 == pytest.approx(4 * phi[0, 0] + 7 * phi[0, 1], rel=1e-9)
