import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mihpo.models import (ENGINE_CURVE_MODEL, DriveLogSample, EngineCurveParams, FitOptions, TireParams,
                          VehicleParams, brake_force_to_pedal, default_tire_space, derive_engine_samples,
                          engine_torque, engine_torque_from_log, fit_engine_curve, fit_tire, least_squares_cubic,
                          load_drive_log, longitudinal_accel, params_from_json, params_to_json,
                          tire_lateral_force, traction_force)
from mihpo.objective import DataError, Dataset

VP = VehicleParams(m=750, m_s=680, C_d=1.2, C_r=100, h_a=0.3, R_w=0.3, eta_t=0.95, i_0=3.0,
                   gear_ratios=(2.0, 1.5, 1.0), w_e_max=7000, track_width=1.6,
                   nominal_loads=(1800, 1800, 1900, 1900))


# --------------------------------------------------------------------------
# Tire


def test_tire_hand_value():
    p = TireParams(10, 1.5, 5000, 0.01, -200)
    assert float(tire_lateral_force(0.05, p)) == pytest.approx(3423.60449058674174, rel=1e-12)


def test_tire_trivial_points():
    assert float(tire_lateral_force(0.0, TireParams(7, 1.2, 3000))) == 0.0
    p = TireParams(7, 1.2, 3000, 0.02, 55.0)
    assert float(tire_lateral_force(-0.02, p)) == 55.0


@given(st.floats(0.1, 30), st.floats(0.1, 2.5), st.floats(1, 1e4), st.floats(-2, 2))
def test_tire_odd_and_bounded(B, C, D, alpha):
    p = TireParams(B, C, D)
    assert float(tire_lateral_force(-alpha, p)) == -float(tire_lateral_force(alpha, p))
    assert abs(float(tire_lateral_force(alpha, p))) <= D


def test_tire_params_validation():
    with pytest.raises(ValueError):
        TireParams(0, 1, 1)
    with pytest.raises(ValueError):
        TireParams(1, 1, 1, float("nan"))


def _tire_data(truth, n=400, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-0.12, 0.12, n)
    return Dataset(a, tire_lateral_force(a, truth) + noise * rng.standard_normal(n), "t", ("alpha_rad",), "fy_n")


def test_fit_tire_noiseless_near_zero_loss():
    truth = TireParams(9.5, 1.4, 5200, 0.008, -150)
    data = _tire_data(truth)
    fitted, rep = fit_tire(data, opts=FitOptions(R=625, eta=5))
    assert rep.best_loss < 1e-4 * np.var(data.outputs)
    assert isinstance(fitted, TireParams)


def test_fit_tire_constant_output():
    data = Dataset(np.linspace(-0.1, 0.1, 200), np.full(200, 300.0))
    space = default_tire_space(peak=1000.0)
    fitted, rep = fit_tire(data, space, FitOptions(R=243, eta=3))
    pred = tire_lateral_force(data.x, fitted)
    # the least-squares constant fit has zero loss
    assert abs(float(np.mean(pred)) - 300.0) < 10.0
    assert rep.best_loss < 1e-3 * 300.0**2


# --------------------------------------------------------------------------
# Engine curve


def test_engine_torque_examples():
    p = EngineCurveParams(10, 20, -5, 1, throttle=15)
    assert engine_torque(0.0, p) == 10
    assert engine_torque(1.0, p) == 26
    assert engine_torque(0.5, p) == 18.875
    with pytest.raises(ValueError):
        engine_torque(1.2, p)
    with pytest.raises(ValueError):
        EngineCurveParams(1, 2, 3, 4, throttle=0)


def _engine_data(coef, noise=0.0, n=200, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.1, 1.0, n)
    y = np.polynomial.polynomial.polyval(w, coef) + noise * rng.standard_normal(n)
    return Dataset(w, y, "e", ("engine_speed_norm",), "torque_nm")


def test_engine_fit_noiseless():
    data = _engine_data([40.0, 260.0, -180.0, 30.0])
    fitted, rep = fit_engine_curve(data, 15.0)
    assert rep.best_loss < 1e-4 * np.var(data.outputs)
    assert fitted.throttle == 15.0


@pytest.mark.xfail(strict=True, reason="random-walk refinement stalls near 1e-5 of the output variance")
def test_engine_fit_noiseless_tight():
    data = _engine_data([40.0, 260.0, -180.0, 30.0])
    _, rep = fit_engine_curve(data, 15.0)
    assert rep.best_loss < 1e-6 * np.var(data.outputs)


def test_engine_fit_noisy_within_ls():
    data = _engine_data([40.0, 260.0, -180.0, 30.0], noise=8.0, seed=1)
    _, ls = least_squares_cubic(data)
    _, rep = fit_engine_curve(data, 20.0)
    assert rep.best_loss <= 1.05 * ls


def test_engine_fit_constant_data():
    data = Dataset(np.linspace(0.1, 1, 100), np.full(100, 80.0))
    fitted, rep = fit_engine_curve(data, 5.0)
    assert rep.best_loss < 1e-5 * 80.0**2
    pred = engine_torque(data.x, fitted)
    np.testing.assert_allclose(pred, 80.0, atol=0.5)


def test_engine_fit_warns_on_poor_fit(caplog):
    data = _engine_data([40.0, 260.0, -180.0, 30.0], noise=5.0)
    with caplog.at_level(logging.WARNING, logger="mihpo.models"):
        fit_engine_curve(data, 5.0, opts=FitOptions(R=3, eta=3, seed=0))
    assert "exceeds 1.05x" in caplog.text


def test_engine_fit_rejects_unnormalized_speed():
    with pytest.raises(DataError):
        fit_engine_curve(Dataset([0.5, 1.5], [1.0, 2.0]), 5.0)


# --------------------------------------------------------------------------
# Longitudinal dynamics and drive logs


def test_torque_from_log_hand_value():
    vp = VehicleParams(**{**VP.to_dict(), "gear_ratios": (2.0,)})
    s = DriveLogSample(v_x=20, a_x=2, w_e=3000, gear=1, throttle=15)
    assert engine_torque_from_log(s, vp) == pytest.approx(109.473684210526315789, rel=1e-12)


def test_torque_from_log_statics():
    s = DriveLogSample(v_x=0, a_x=0, w_e=1000, gear=2, throttle=5)
    assert engine_torque_from_log(s, VP) == pytest.approx(VP.C_r * VP.R_w / (VP.eta_t * 1.5 * VP.i_0), rel=1e-12)


@given(st.floats(-50, 400), st.floats(0, 80), st.integers(1, 3))
def test_longitudinal_round_trip(T, v, gear):
    a = longitudinal_accel(traction_force(T, gear, VP), v, VP)
    s = DriveLogSample(v_x=v, a_x=a, w_e=VP.engine_rpm(v, gear), gear=gear, throttle=15)
    assert engine_torque_from_log(s, VP) == pytest.approx(T, rel=1e-9, abs=1e-9)


def test_derive_engine_samples_bins_and_recovers():
    samples = []
    for thr, T in ((5.4, 90.0), (14.0, 150.0), (9.0, 999.0), (16.9, 160.0)):
        v, gear = 30.0, 2
        a = longitudinal_accel(traction_force(T, gear, VP), v, VP)
        samples.append(DriveLogSample(v, a, 3500.0, gear, thr))
    out = derive_engine_samples(samples, VP, (5, 15, 20))
    assert sorted(out) == [5.0, 15.0]
    np.testing.assert_allclose(out[5.0].outputs, [90.0], rtol=1e-12)
    np.testing.assert_allclose(out[15.0].outputs, [150.0, 160.0], rtol=1e-12)
    np.testing.assert_allclose(out[15.0].x, [0.5, 0.5])
    with pytest.raises(DataError):
        derive_engine_samples([], VP)


def test_load_drive_log(tmp_path):
    f = tmp_path / "log.csv"
    f.write_text("v_x,a_x,engine_rpm,gear,throttle_pct\n20,1.5,4000,2,15\n")
    (s,) = load_drive_log(f)
    assert s == DriveLogSample(20.0, 1.5, 4000.0, 2, 15.0)
    (tmp_path / "bad.csv").write_text("v,a\n1,2\n")
    with pytest.raises(DataError):
        load_drive_log(tmp_path / "bad.csv")


def test_vehicle_params_round_trip_and_validation():
    assert VehicleParams.from_dict(VP.to_dict()) == VP
    with pytest.raises(ValueError):
        VehicleParams(**{**VP.to_dict(), "m": -1})
    with pytest.raises(ValueError):
        VP.gear_ratio(4)
    assert VP.engine_rpm(10.0, 1) == pytest.approx(10 / 0.3 * 2 * 3 * 60 / (2 * math.pi))


# --------------------------------------------------------------------------
# Brake and serialization


def test_brake_examples():
    assert brake_force_to_pedal(0.0, 120.0) == 0.0
    assert brake_force_to_pedal(120.0 * 50, 120.0) == 50.0
    assert brake_force_to_pedal(1e9, 120.0) == 100.0
    with pytest.raises(ValueError):
        brake_force_to_pedal(-1.0, 120.0)


def test_params_json_round_trip(tmp_path):
    t = TireParams(9.5, 1.4, 5200, 0.008, -150)
    params_to_json(tmp_path / "t.json", "tire", t, 1.0)
    assert params_from_json(tmp_path / "t.json") == t
    e = EngineCurveParams(1, 2, 3, 4, throttle=15)
    params_to_json(tmp_path / "e.json", "engine_curve", e, None)
    assert params_from_json(tmp_path / "e.json") == e


def test_least_squares_cubic_exact():
    coef = np.array([1.0, -2.0, 3.0, -0.5])
    c, loss = least_squares_cubic(_engine_data(coef))
    np.testing.assert_allclose(c, coef, rtol=1e-9)
    assert loss < 1e-20
    assert ENGINE_CURVE_MODEL.param_names == ("p0", "p1", "p2", "p3")
