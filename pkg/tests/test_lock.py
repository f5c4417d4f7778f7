from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from ringlock.environment import ConfigurationError, Environment, NoiseKind, NoiseSpec, dac_step
from ringlock.lock import (
    CHIP_PHASE_CURVES,
    CHIP_TEMPERATURE_CURVES,
    CalibrationSweep,
    LockConfig,
    LockMode,
    calibrate_tuning_curves,
    dynamic_lock,
    paired_dynamic_lock,
    stability_summary,
    static_align,
    summarize_wavelengths,
    tuning_curve_voltages,
)
from ringlock.resonator import (
    InfeasibleAlignment,
    RingParams,
    analytic_alignment,
    central_wavelengths,
    default_device,
    random_device,
)

QUIET = NoiseSpec.quiet()


def test_tuning_curves_at_reference_temperature():
    np.testing.assert_allclose(
        tuning_curve_voltages(30.0, CHIP_TEMPERATURE_CURVES), [3.741, 3.6962], atol=1e-12
    )


def test_phase_curves_intercepts_and_end_of_sweep():
    np.testing.assert_allclose(tuning_curve_voltages(0.0, CHIP_PHASE_CURVES), [3.746, 3.702])
    v = tuning_curve_voltages(6.5, CHIP_PHASE_CURVES)
    assert v[0] == pytest.approx(3.71337845, abs=1e-9)


def test_tuning_curves_clamped_non_negative():
    assert np.all(tuning_curve_voltages(200.0, CHIP_TEMPERATURE_CURVES) == 0.0)


def test_lock_config_invariants():
    with pytest.raises(ConfigurationError):
        LockConfig(success_detuning_tol=0.0)
    with pytest.raises(ConfigurationError):
        LockConfig(per_step_budget=2)


def test_static_align_from_solution_is_immediate():
    dev = default_device()
    env = Environment(QUIET)
    res = static_align(dev, env, LockConfig(), x0=analytic_alignment(dev))
    assert res.success
    assert res.n_evals <= dev.n_rings + 2
    assert np.max(np.abs(res.residual_detunings)) < 0.01


def test_static_align_rejects_infeasible_device():
    dev = default_device()
    dev = dev.with_rings([RingParams(1565.2), RingParams(1564.9)])
    with pytest.raises(InfeasibleAlignment):
        static_align(dev, Environment(QUIET))


def test_noiseless_cold_starts_succeed():
    dev = default_device()
    cfg = LockConfig(samples_per_eval=1)
    ok = sum(static_align(dev, Environment(QUIET, s), cfg, seed=s).success for s in range(100))
    assert ok >= 95


def test_noisy_cold_starts_iteration_count():
    dev = default_device()
    results = [static_align(dev, Environment(NoiseSpec(), s), seed=s) for s in range(40)]
    mean_iter = np.mean([r.n_iterations for r in results if r.success])
    assert 57 / 2 <= mean_iter <= 57 * 2


def test_static_align_records_trace():
    res = static_align(default_device(), Environment(QUIET), seed=1, record_trace=True)
    assert len(res.trace) == res.n_iterations + 1
    values = [f for _, f in res.trace]
    assert values[-1] < values[0]


def test_noiseless_align_matches_analytic_on_random_devices():
    rng = np.random.default_rng(42)
    cfg = LockConfig(samples_per_eval=1)
    tol = cfg.x_tol + dac_step(16, 10.0)
    for k in range(50):
        dev = random_device(rng)
        v_true = analytic_alignment(dev)
        x0 = np.clip(v_true + rng.normal(0, 0.2, 2), 0, None)
        res = static_align(dev, Environment(QUIET, k), cfg, x0=x0)
        assert np.max(np.abs(res.volts - v_true)) <= tol


def test_in_situ_static_environment_holds_voltages():
    noise = NoiseSpec.quiet(n_steps=10)
    rec = dynamic_lock(default_device(), noise, LockConfig(samples_per_eval=1), seed=0)
    volts = rec.volts()
    np.testing.assert_array_equal(volts[1:], np.repeat(volts[:1], len(volts) - 1, axis=0))
    assert np.all(stability_summary(rec).std_pm == 0.0)


def test_uncorrected_is_open_loop():
    dev = default_device()
    noise = NoiseSpec(kind=NoiseKind.TEMPERATURE_WALK)
    rec = dynamic_lock(dev, noise, LockConfig(lock_mode=LockMode.UNCORRECTED), seed=2)
    v = rec.steps[0].volts
    env = Environment(noise, 2)
    for step, state in zip(rec.steps, env.states()):
        np.testing.assert_array_equal(step.volts, v)
        expected = central_wavelengths(dev, v, state.chip_temperature, state.vp)
        np.testing.assert_allclose(step.wavelengths_nm, expected, rtol=0, atol=1e-12)


@pytest.fixture(scope="module")
def walk_runs():
    return paired_dynamic_lock(default_device(), NoiseSpec(kind="temperature_walk"), seed=0)


def test_walk_uncorrected_variation(walk_runs):
    s = stability_summary(walk_runs[LockMode.UNCORRECTED])
    assert np.all(np.abs(s.total_variation_pm - 84.0) <= 0.2 * 84.0)


def test_walk_in_situ_sub_picometre(walk_runs):
    s = stability_summary(walk_runs[LockMode.IN_SITU], walk_runs[LockMode.UNCORRECTED])
    assert np.all(s.std_pm <= 1.0)


def test_walk_residuals_only_exceed_tolerance_on_exhausted_steps(walk_runs):
    s = stability_summary(walk_runs[LockMode.IN_SITU], tol_pm=1.0)
    assert s.n_out_of_tol <= s.n_budget_exhausted + 1  # the initial cold lock


def test_in_situ_beats_tuning_curves(walk_runs):
    unc = walk_runs[LockMode.UNCORRECTED]
    ins = stability_summary(walk_runs[LockMode.IN_SITU], unc).improvement_factor
    base = stability_summary(walk_runs[LockMode.TUNING_CURVE_BASELINE], unc).improvement_factor
    assert ins >= base


def test_paired_runs_share_environment(walk_runs):
    chip = [[s.chip_temperature for s in r.steps] for r in walk_runs.values()]
    assert chip[0] == chip[1] == chip[2]


def test_stability_summary_metrics():
    flat = summarize_wavelengths(np.full((10, 2), 3.0), 60.0)
    assert np.all(flat.std_pm == 0) and np.all(flat.fractional_drift == 0)
    s = summarize_wavelengths(np.array([[0.0], [1.12]]), 60.0, reference_variation=84.0)
    assert s.std_pm[0] == pytest.approx(0.56)
    assert s.fractional_drift[0] == pytest.approx(9.33e-3, abs=1e-5)
    assert s.improvement_factor == pytest.approx(150.0)
    with pytest.raises(ValueError):
        summarize_wavelengths(np.empty((0, 2)), 60.0)


def test_calibration_recovers_temperature_slope():
    cal = calibrate_tuning_curves(default_device(), CalibrationSweep(repeats=2))
    slope = cal.curves.coeffs[0][0]
    assert slope == pytest.approx(-0.0609, rel=0.1)


def test_calibration_phase_fit_is_concave():
    cal = calibrate_tuning_curves(default_device(), CalibrationSweep.phase(repeats=2))
    assert all(row[0] < 0 for row in cal.curves.coeffs)


def test_calibration_rejects_zero_width_sweep():
    with pytest.raises(ConfigurationError):
        CalibrationSweep(start=30.0, stop=30.0)


def test_noiseless_calibration_repeats_identical():
    cal = calibrate_tuning_curves(
        default_device(cross=0.0), CalibrationSweep(repeats=5), noise=QUIET,
        cfg=LockConfig(samples_per_eval=1),
    )
    assert len(cal.per_repeat) == 5
    assert all(c == cal.per_repeat[0] for c in cal.per_repeat)


def test_baseline_uses_supplied_curves():
    dev = default_device()
    cfg = replace(LockConfig(), lock_mode=LockMode.TUNING_CURVE_BASELINE)
    rec = dynamic_lock(dev, NoiseSpec(kind="temperature_walk"), cfg, seed=0,
                       curves=CHIP_TEMPERATURE_CURVES)
    first = rec.steps[0]
    np.testing.assert_allclose(
        first.volts, tuning_curve_voltages(first.temperature, CHIP_TEMPERATURE_CURVES), atol=2e-4
    )
