from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ringlock.environment import (
    ConfigurationError,
    DACClampWarning,
    Environment,
    NoiseKind,
    NoiseSpec,
    apply_static_offsets,
    dac_step,
    gen_crosstalk_sweep,
    gen_temperature_walk,
    measure_power,
    quantize_voltage,
)
from ringlock.resonator import default_device

WALK = NoiseSpec(kind=NoiseKind.TEMPERATURE_WALK)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_walk_endpoint_exact_for_every_seed(seed):
    temps = gen_temperature_walk(WALK, seed, t0=30.0)
    assert temps.shape == (60,)
    assert temps[-1] - 30.0 == pytest.approx(1.0, abs=1e-12)
    steps = np.diff(np.concatenate([[30.0], temps]))
    np.testing.assert_allclose(np.abs(steps), 0.1, atol=1e-12)


def test_walk_reproducible_and_seed_dependent():
    a = gen_temperature_walk(WALK, 5)
    np.testing.assert_array_equal(a, gen_temperature_walk(WALK, 5))
    assert not np.array_equal(a, gen_temperature_walk(WALK, 6))


@pytest.mark.parametrize("net, n", [(1.05, 60), (7.0, 60), (0.9, 60)])
def test_walk_unreachable_endpoint_rejected(net, n):
    with pytest.raises(ConfigurationError):
        gen_temperature_walk(NoiseSpec(kind="temperature_walk", net_drift=net, n_steps=n), 0)


def test_crosstalk_sweep_half_volt_grid():
    vp = gen_crosstalk_sweep(0.0, 6.5, 14)
    np.testing.assert_allclose(np.diff(vp), 0.5)
    assert vp[0] == 0.0 and vp[-1] == 6.5


def test_crosstalk_sweep_degenerate_cases():
    np.testing.assert_array_equal(gen_crosstalk_sweep(1.0, 2.0, 2), [1.0, 2.0])
    np.testing.assert_array_equal(gen_crosstalk_sweep(3.0, 3.0, 5), np.full(5, 3.0))
    with pytest.raises(ConfigurationError):
        gen_crosstalk_sweep(0.0, 1.0, 1)


def test_measure_power_noiseless_passthrough():
    spec = NoiseSpec(measurement_sigma=0.0)
    p = np.array([0.1, 0.7])
    np.testing.assert_array_equal(measure_power(p, spec, np.random.default_rng(0)), p)


def test_measure_power_noise_level():
    spec = NoiseSpec(measurement_sigma=0.01)
    rng = np.random.default_rng(1)
    draws = measure_power(np.zeros(100_000), spec, rng, full_scale=2.0)
    assert np.std(draws) == pytest.approx(0.02, rel=0.05)


def test_measure_power_averaging_reduces_noise():
    spec = NoiseSpec(measurement_sigma=0.01)
    draws = measure_power(np.zeros(20_000), spec, np.random.default_rng(2), n_samples=16)
    assert np.std(draws) == pytest.approx(0.0025, rel=0.05)


def test_measure_power_deterministic():
    spec = NoiseSpec()
    a = measure_power(0.5, spec, np.random.default_rng(9))
    assert a == measure_power(0.5, spec, np.random.default_rng(9))


def test_dac_grid_step_16_bit():
    assert dac_step(16, 10.0) == pytest.approx(10.0 / 65535)
    assert dac_step(16, 10.0) * 1e3 == pytest.approx(0.1526, abs=1e-4)


def test_quantize_endpoints_and_grid_points():
    assert quantize_voltage(10.0, 16, 10.0) == 10.0
    assert quantize_voltage(0.0, 16, 10.0) == 0.0
    on_grid = 1234 * dac_step(16, 10.0)
    assert quantize_voltage(on_grid, 16, 10.0) == pytest.approx(on_grid, abs=1e-15)


@given(st.floats(0.0, 10.0), st.integers(8, 24))
def test_quantize_idempotent(v, bits):
    once = quantize_voltage(v, bits, 10.0)
    assert quantize_voltage(once, bits, 10.0) == once
    assert abs(once - v) <= 0.5 * dac_step(bits, 10.0) + 1e-12


def test_quantize_clamps_with_warning():
    with pytest.warns(DACClampWarning):
        assert quantize_voltage(12.0, 16, 10.0) == 10.0
    with pytest.warns(DACClampWarning):
        assert quantize_voltage(-1.0, 16, 10.0) == 0.0


def test_noise_spec_validation():
    with pytest.raises(ConfigurationError):
        NoiseSpec(measurement_sigma=-1.0)
    with pytest.raises(ConfigurationError):
        NoiseSpec(dac_bits=4)
    with pytest.raises(ValueError):
        NoiseSpec(kind="sideways")


def test_environment_schedules():
    env = Environment(WALK, seed=3)
    states = env.states()
    assert len(states) == 61
    assert states[-1].temperature - states[0].temperature == pytest.approx(1.0)
    xt = Environment(NoiseSpec(kind="crosstalk_sweep", step_size=0.5, n_steps=13), seed=3)
    assert xt.states()[-1].vp == pytest.approx(6.5)


def test_environment_step_advances_and_stops():
    env = Environment(NoiseSpec(kind="temperature_walk", n_steps=2, net_drift=0.2))
    env.step()
    env.step()
    assert env.state.time_index == 2
    with pytest.raises(IndexError):
        env.step()


def test_environment_streams_are_independent():
    """Reading the photodiode does not perturb the walk or the ambient jitter."""
    a = Environment(WALK, seed=11)
    b = Environment(WALK, seed=11)
    a.measure(np.zeros(1000))
    for _ in range(60):
        sa, sb = a.step(), b.step()
        assert sa.chip_temperature == sb.chip_temperature


def test_quantize_disabled_only_clips():
    env = Environment(NoiseSpec.quiet())
    np.testing.assert_array_equal(env.quantize([-0.5, 3.3333333]), [0.0, 3.3333333])
    noisy = Environment(NoiseSpec())
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        noisy.quantize([11.0])


def test_static_offsets_shift_cold_resonances():
    dev = default_device()
    moved = apply_static_offsets(dev, 20.0, np.random.default_rng(0))
    shifts = [(m.lambda0 - r.lambda0) * 1000 for m, r in zip(moved.rings, dev.rings)]
    assert all(s != 0 for s in shifts)
    assert all(abs(s) < 100 for s in shifts)
