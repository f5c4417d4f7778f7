from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ringlock.resonator import (
    LASER_NM,
    DeviceModel,
    InfeasibleAlignment,
    RingParams,
    Topology,
    analytic_alignment,
    central_wavelengths,
    classify_critical_points,
    combined_transmission,
    default_device,
    detunings_pm,
    lorentzian_transmission,
    notch_power,
    random_device,
)


def two_ring(detune_pm=(500.0, 450.0), gamma=(175.0, 175.0), alpha=1.0, **kw):
    rings = tuple(
        RingParams(lambda0=LASER_NM - d / 1000.0, gamma_tune=g) for d, g in zip(detune_pm, gamma)
    )
    cross = np.array([[0.0, alpha], [alpha, 0.0]])
    return DeviceModel(rings=rings, cross_tune=cross, phase_crosstalk=np.zeros(2), **kw)


def test_lorentzian_on_resonance_value():
    assert lorentzian_transmission(1565.0, 1565.0, 60.0) == pytest.approx(-2.0 / 60.0)


def test_lorentzian_half_width_is_half_depth():
    assert lorentzian_transmission(30.0, 0.0, 60.0) == pytest.approx(-1.0 / 60.0)


def test_lorentzian_rejects_non_finite():
    with pytest.raises(ValueError):
        lorentzian_transmission(float("nan"), 0.0, 60.0)
    with pytest.raises(ValueError):
        lorentzian_transmission(0.0, 0.0, 0.0)


@given(st.floats(-1e4, 1e4), st.floats(1.0, 500.0))
def test_lorentzian_even_in_detuning(d, width):
    assert lorentzian_transmission(d, 0.0, width) == lorentzian_transmission(-d, 0.0, width)


def test_notch_power_limits():
    assert notch_power(0.0, 60.0) == 0.0
    assert notch_power(30.0, 60.0) == pytest.approx(0.5)
    assert notch_power(1e6, 60.0) == pytest.approx(1.0)


def test_analytic_alignment_hand_solved_system():
    v = analytic_alignment(two_ring())
    # Cramer's rule on [[175, 1], [1, 175]] v^2 = (500, 450)
    np.testing.assert_allclose(v**2, [87050 / 30624, 78250 / 30624], rtol=1e-12)
    np.testing.assert_allclose(v, [1.6860, 1.5985], atol=1e-4)


def test_analytic_alignment_already_aligned():
    dev = two_ring(detune_pm=(0.0, 0.0), alpha=0.0)
    np.testing.assert_array_equal(analytic_alignment(dev), [0.0, 0.0])


def test_analytic_alignment_laser_blue_of_cold_resonance():
    dev = two_ring(detune_pm=(-100.0, 450.0), alpha=0.0)
    with pytest.raises(InfeasibleAlignment):
        analytic_alignment(dev)


def test_default_device_aligns_near_reported_voltages():
    np.testing.assert_allclose(analytic_alignment(default_device()), [3.60, 3.56], atol=1e-3)


def test_dominance_condition_enforced():
    with pytest.raises(ValueError, match="dominance"):
        two_ring(detune_pm=(500.0, 50.0), alpha=20.0)


def test_cross_tune_must_be_symmetric_with_zero_diagonal():
    rings = (RingParams(1564.5), RingParams(1564.55))
    with pytest.raises(ValueError):
        DeviceModel(rings, np.array([[0.0, 1.0], [2.0, 0.0]]), np.zeros(2))
    with pytest.raises(ValueError):
        DeviceModel(rings, np.array([[1.0, 1.0], [1.0, 0.0]]), np.zeros(2))


def test_ring_params_validation():
    with pytest.raises(ValueError):
        RingParams(1565.0, gamma_width=-1.0)
    with pytest.raises(ValueError):
        RingParams(1700.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_analytic_alignment_lands_every_ring_on_laser(seed, n):
    dev = random_device(np.random.default_rng(seed), n_rings=n)
    d = detunings_pm(dev, analytic_alignment(dev))
    assert np.max(np.abs(d)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 1), st.floats(0.0, 1.0))
def test_central_wavelength_monotone_in_each_voltage(seed, j, dv):
    dev = random_device(np.random.default_rng(seed))
    v = np.random.default_rng(seed + 1).uniform(0, 5, 2)
    w = v.copy()
    w[j] += dv
    assert np.all(central_wavelengths(dev, w) >= central_wavelengths(dev, v))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_parallel_transmission_is_sum_of_single_rings(seed, n):
    rng = np.random.default_rng(seed)
    dev = random_device(rng, n_rings=n)
    v = rng.uniform(0, 5, n)
    lam = central_wavelengths(dev, v)
    singles = [lorentzian_transmission(l * 1000, LASER_NM * 1000, 60.0) for l in lam]
    assert combined_transmission(dev, v) == pytest.approx(sum(singles), rel=1e-9)


@pytest.mark.parametrize("topology", list(Topology))
def test_transmission_minimum_at_analytic_solution(topology):
    dev = default_device(topology=topology)
    v0 = analytic_alignment(dev)
    f0 = combined_transmission(dev, v0)
    rng = np.random.default_rng(3)
    for dv in rng.normal(0, 0.05, size=(50, 2)):
        assert combined_transmission(dev, v0 + dv) > f0


def test_temperature_and_phase_shift_resonances():
    dev = default_device()
    v = analytic_alignment(dev)
    d = detunings_pm(dev, v, temperature=dev.t_ref + 1.0)
    np.testing.assert_allclose(d, [80.0, 80.0], atol=1e-9)
    d = detunings_pm(dev, v, vp=6.5)
    np.testing.assert_allclose(d, [45.0, 45.0], atol=1e-9)


def test_critical_points_default_device_single_cluster():
    dev = default_device()
    rep = classify_critical_points(dev, n_starts=100)
    assert rep.n_clusters == 1
    assert rep.max_offset_from_analytic < 1e-3


def test_critical_points_decoupled_device():
    rep = classify_critical_points(default_device(cross=0.0), n_starts=30)
    assert rep.n_clusters == 1


def test_critical_points_symmetric_device():
    dev = two_ring(detune_pm=(500.0, 500.0))
    rep = classify_critical_points(dev, n_starts=30)
    assert rep.n_clusters == 1
    assert rep.centers[0][0] == pytest.approx(rep.centers[0][1], abs=1e-4)


def test_critical_points_series_topology():
    rep = classify_critical_points(default_device(topology="series"), n_starts=30)
    assert rep.n_clusters == 1
    assert rep.max_offset_from_analytic < 1e-3


def test_critical_points_rejects_empty_sampling():
    with pytest.raises(ValueError):
        classify_critical_points(default_device(), n_starts=0)


def test_three_ring_default_device_is_feasible():
    dev = default_device(n_rings=3)
    assert dev.n_rings == 3
    assert math.isfinite(float(np.sum(analytic_alignment(dev))))
