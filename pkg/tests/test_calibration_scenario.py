import numpy as np
import pytest

from amod.calibration import InsufficientVariationError, calibrate_cancellation, calibrate_completion
from amod.config import DemandProfile, load_config
from amod.scenario import CORE_ZONES, Scenario, SurgeSpec, data_path, inject_surge, CONFIG_FILE


def planted_cancellation(seed=0, c=(0.7, 0.12, -0.03)):
    rng = np.random.default_rng(seed)
    Q = rng.uniform(10, 60, 400)
    V = rng.uniform(5, 40, 400)
    return Q, V, c[0] + c[1] * Q + c[2] * V


def test_cancellation_recovers_planted_coefficients():
    Q, V, y = planted_cancellation()
    fit = calibrate_cancellation(Q, V, y)
    np.testing.assert_allclose(fit.coefficients, [0.7, 0.12, -0.03], atol=1e-6)
    assert fit.r2 == pytest.approx(1.0)


def test_cancellation_constant_inputs_rejected():
    with pytest.raises(InsufficientVariationError):
        calibrate_cancellation(np.full(50, 20.0), np.full(50, 10.0), np.full(50, 1.0))


def test_completion_recovers_kappa():
    rng = np.random.default_rng(1)
    tau = rng.uniform(3, 20, (3, 3))
    occ = rng.uniform(0, 80, (200, 3, 3))
    fit = calibrate_completion(occ, 1.0 * occ / tau, tau)
    assert fit.coefficients[0] == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(fit.details["per_pair"], 1.0, atol=1e-6)


def test_completion_zero_rates_give_zero_slope():
    occ = np.random.default_rng(2).uniform(1, 10, (20, 2, 2))
    fit = calibrate_completion(occ, np.zeros_like(occ), np.full((2, 2), 5.0))
    assert fit.coefficients[0] == 0


def test_unit_surge_leaves_profile_unchanged():
    prof = DemandProfile(np.random.default_rng(0).uniform(0, 3, (288, 6, 6)))
    out = inject_surge(prof, SurgeSpec(3, 21 * 60, 30, 1.0))
    np.testing.assert_array_equal(out.rates, prof.rates)


def test_surge_is_local_in_time_and_origin(city):
    prof = city.profile
    spec = SurgeSpec(3, 21 * 60, 30, 3.0)
    out = inject_surge(prof, spec)
    b0, b1 = int(21 * 60 / prof.bucket_width), int((21 * 60 + 30) / prof.bucket_width)
    np.testing.assert_array_equal(out.rates[b0:b1, 3], 3.0 * prof.rates[b0:b1, 3])
    mask = np.ones(out.rates.shape, bool)
    mask[b0:b1, 3] = False
    np.testing.assert_array_equal(out.rates[mask], prof.rates[mask])


def test_hidden_surge_revealed_at_onset(city):
    spec = SurgeSpec(3, 21 * 60, 30, 3.0)
    sc = Scenario(city.profile, surge=spec, start=20 * 60, duration=180)
    before = sc.forecast(20 * 60 + 50, 6, 5.0)
    np.testing.assert_array_equal(before, city.profile.window(20 * 60 + 50, 6, 5.0))
    at = sc.forecast(21 * 60, 6, 5.0)
    np.testing.assert_array_equal(at, sc.true_profile().window(21 * 60, 6, 5.0))
    known = Scenario(city.profile, surge=spec, start=20 * 60, duration=180, surge_hidden=False)
    assert known.forecast(20 * 60 + 50, 6, 5.0).sum() > before.sum()


def test_surge_must_fit_the_run(city):
    with pytest.raises(ValueError):
        Scenario(city.profile, surge=SurgeSpec(3, 23 * 60, 30), start=20 * 60, duration=120)


def test_default_city(city):
    net, prof = city.network, city.profile
    assert net.zone_count == 6 and net.fleet_size == 3000
    assert net.idle_floor == 15 and net.price_cap == 2.5 and net.op_cost_per_hour == 10
    origin = prof.rates.sum(axis=(0, 2))
    assert origin[list(CORE_ZONES)].sum() / origin.sum() >= 0.68
    assert load_config(data_path(CONFIG_FILE))[0].zone_count == 6
