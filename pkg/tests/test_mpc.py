import dataclasses
import json

import numpy as np
import pytest

from amod import io
from amod.cli import main
from amod.config import DemandProfile
from amod.core import SystemState
from amod.mpc import (MpcConfig, compare_strategies, profit_gap, replay_profit, run_mpc, shock_summary,
                      targets_to_actions)
from amod.scenario import Scenario


def short(city, start=8 * 60, duration=30.0, **kw):
    return Scenario(city.profile, start=start, duration=duration, **kw)


def test_config_validation():
    with pytest.raises(ValueError):
        MpcConfig(horizon=32, period=5)
    with pytest.raises(ValueError):
        MpcConfig(mode="other")
    assert MpcConfig(horizon=60).stages == 12


def test_horizon_longer_than_run_rejected(city):
    with pytest.raises(ValueError):
        run_mpc(city, short(city, duration=20.0), MpcConfig(horizon=30))


def test_targets_to_actions_moves_surplus(city):
    net = city.network
    state = SystemState.initial(net, np.array([100, 20, 20, 20, 20, 20.0]))
    idle = np.array([[40, 40, 40, 40, 40, 40.0]])
    acts = targets_to_actions(state, np.zeros((1, 6)), idle, net, rebalancing=True)
    moved = acts[0].r * net.control_period
    assert moved[0].sum() == pytest.approx(60) and moved[1:].sum() == 0
    only_park = targets_to_actions(state, np.zeros((1, 6)), idle, net, rebalancing=False)
    assert not only_park[0].r.any()


def test_run_accounting_and_determinism(city):
    sc = short(city)
    a = run_mpc(city, sc, MpcConfig(), seed=3)
    assert a.conservation_error <= 1e-9
    assert len(a.metrics) == 6
    assert a.profit == pytest.approx(sum(m["profit"] for m in a.metrics), rel=1e-12)
    rev, cost = replay_profit(a.world, 3000 - float(np.sum(a.states[0]["N_p"])))
    assert rev == pytest.approx(a.revenue, rel=1e-6)
    assert cost == pytest.approx(a.cost, rel=1e-6)
    b = run_mpc(city, sc, MpcConfig(), seed=3)
    assert a.profit == b.profit and a.actions == b.actions


def test_pricing_only_audit(city):
    rec = run_mpc(city, short(city), MpcConfig(mode="pricing_only"), seed=0)
    assert all(not np.any(row["r"]) for row in rec.actions)


def test_zero_demand_parks_fleet(city):
    K = city.network.zone_count
    empty = dataclasses.replace(city, profile=DemandProfile(np.zeros((288, K, K))))
    rec = run_mpc(city=empty, scenario=short(empty, duration=60.0), config=MpcConfig(), seed=0)
    assert rec.trips == 0 and rec.revenue == 0
    # only the idle floor (plus rounding of fractional moves) stays on duty
    assert sum(rec.states[-1]["N_p"]) >= 3000 - K * (city.network.idle_floor + 2)


def test_identical_strategies_have_zero_gap(city):
    out = compare_strategies(city, short(city), MpcConfig(), seeds=(0,), modes=("joint", "joint"))
    assert out["profit_gap_pct"] == 0.0
    assert profit_gap(10.0, 10.0) == 0.0 and profit_gap(11.0, 10.0) == pytest.approx(10.0)


def test_shock_summary_on_synthetic_series(city):
    rec = run_mpc(city, short(city), MpcConfig(), seed=0, keep_world=False)
    series = [1.0, 1.0, 3.0, 2.0, 1.1, 1.0]
    for m, v in zip(rec.metrics, series):
        m["wait_z4"] = v
    s = shock_summary(rec, 3, rec.times[2], "wait")
    assert s["baseline"] == 1.0 and s["peak"] == 3.0
    assert s["recovery_minutes"] == pytest.approx(10.0) and s["recovered"]


def test_run_directory_layout(city, tmp_path):
    rec = run_mpc(city, short(city), MpcConfig(), seed=0)
    d = io.write_run(rec, tmp_path / "run")
    for name in ("config.json", "metrics.csv", "actions.csv", "states.csv", "convergence.csv", "events.csv"):
        assert (d / name).exists()
    cfg = json.loads((d / "config.json").read_text())
    assert cfg["summary"]["profit"] == pytest.approx(rec.profit)


@pytest.mark.parametrize("solver", ["dual-dp", "concave"])
def test_cli_simulate_other_solvers(tmp_path, solver, capsys):
    code = main(["simulate", "--start", "8:00", "--duration-min", "30", "--solver", solver,
                 "--out", str(tmp_path / solver)])
    assert code == 0
    assert (tmp_path / solver / "metrics.csv").exists()
    assert "profit" in capsys.readouterr().out


def test_cli_compare_and_surge(tmp_path):
    assert main(["compare", "--start", "8:00", "--duration-min", "30", "--out", str(tmp_path / "c")]) == 0
    summary = json.loads((tmp_path / "c" / "summary.json").read_text())
    assert "profit_gap_pct" in summary
    assert main(["surge", "--zone", "4", "--at", "21:00", "--before-min", "10", "--after-min", "40",
                 "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "pickup_series.csv").exists()


def test_cli_calibrate_and_sweep(tmp_path):
    assert main(["calibrate", "--start", "8:00", "--duration-min", "60", "--out", str(tmp_path / "k")]) == 0
    fit = json.loads((tmp_path / "k" / "calibration.json").read_text())
    assert fit["cancellation"]["coefficients"][1] > 0
    assert main(["sweep-horizon", "--start", "8:00", "--duration-min", "30", "--horizons", "10", "20",
                 "--out", str(tmp_path / "h")]) == 0


def test_cli_bound(tmp_path):
    assert main(["bound", "--start", "8:00", "--duration-min", "30", "--every", "3",
                 "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "bounds.csv").exists()
