"""Disturbances acting on the chip and the photodiode/DAC front end.

Every generator draws from its own child of a single ``SeedSequence`` so a
corrected and an uncorrected run with the same seed see the same
temperature walk and the same ambient jitter, however many photodiode
readings each of them takes.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ringlock.resonator import T_REF_C


class NoiseKind(str, enum.Enum):
    TEMPERATURE_WALK = "temperature_walk"
    CROSSTALK_SWEEP = "crosstalk_sweep"
    STATIC_OFFSET = "static_offset"
    NONE = "none"


class ConfigurationError(ValueError):
    pass


class DACClampWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    """Disturbance schedule and measurement front end.

    Parameters
    ----------
    kind : NoiseKind
        Which programmed disturbance is applied.
    step_size : float
        Temperature increment [degC] for a walk, phase-shifter increment [V]
        for a crosstalk sweep.
    n_steps : int
        Number of environment steps after the initial state.
    net_drift : float
        Required end-minus-start temperature of a walk [degC].
    measurement_sigma : float
        Photodiode noise per sample as a fraction of full scale.
    dac_bits : int or None
        Heater DAC depth; ``None`` disables quantization.
    v_max : float
        DAC full scale [V].
    ambient_sigma : float
        Standard deviation [degC] of the unprogrammed chip-temperature jitter
        drawn afresh at every step (Peltier regulation error, lab drift).
    static_offset_sigma : float
        Standard deviation [pm] of per-ring fabrication offsets drawn for
        ``STATIC_OFFSET`` scenarios.
    """

    kind: NoiseKind = NoiseKind.NONE
    step_size: float = 0.1
    n_steps: int = 60
    net_drift: float = 1.0
    measurement_sigma: float = 0.005
    dac_bits: int | None = 16
    v_max: float = 10.0
    ambient_sigma: float = 0.0375
    static_offset_sigma: float = 20.0
    sweep_start: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.n_steps < 0:
            raise ConfigurationError(f"n_steps must be >= 0, got {self.n_steps}")
        if self.step_size < 0:
            raise ConfigurationError(f"step_size must be >= 0, got {self.step_size}")
        if self.measurement_sigma < 0:
            raise ConfigurationError("measurement_sigma must be >= 0")
        if self.ambient_sigma < 0:
            raise ConfigurationError("ambient_sigma must be >= 0")
        if self.static_offset_sigma < 0:
            raise ConfigurationError("static_offset_sigma must be >= 0")
        if self.dac_bits is not None and not 8 <= self.dac_bits <= 24:
            raise ConfigurationError(f"dac_bits must be in [8, 24], got {self.dac_bits}")
        if not self.v_max > 0:
            raise ConfigurationError("v_max must be > 0")

    @classmethod
    def quiet(cls, **overrides) -> "NoiseSpec":
        """No programmed disturbance, no jitter, no readout noise, no DAC."""
        base = dict(
            kind=NoiseKind.NONE,
            measurement_sigma=0.0,
            ambient_sigma=0.0,
            dac_bits=None,
        )
        base.update(overrides)
        return cls(**base)


def gen_temperature_walk(
    spec: NoiseSpec, seed: int | np.random.Generator | None, t0: float = T_REF_C
) -> NDArray[np.float64]:
    """Temperatures after each of ``spec.n_steps`` steps of +-``step_size``.

    The number of up and down steps is fixed by the endpoint constraint and
    their order is a uniform random permutation, so every admissible path is
    equally likely and the endpoint is exact.
    """
    n, step, net = spec.n_steps, spec.step_size, spec.net_drift
    if step <= 0 or n < 1:
        raise ConfigurationError("temperature walk needs step_size > 0 and n_steps >= 1")
    k = net / step
    k_int = round(k)
    if not math.isclose(k, k_int, abs_tol=1e-9):
        raise ConfigurationError(f"net_drift {net} is not a multiple of step {step}")
    if abs(k_int) > n or (n - k_int) % 2:
        raise ConfigurationError(
            f"net drift of {k_int} steps is unreachable in {n} steps of +-1"
        )
    n_up = (n + k_int) // 2
    signs = np.array([1] * n_up + [-1] * (n - n_up))
    rng = np.random.default_rng(seed)
    rng.shuffle(signs)
    # integer partial sums keep the endpoint exact
    return t0 + np.cumsum(signs) * step


def gen_crosstalk_sweep(v_start: float, v_end: float, n_points: int) -> NDArray[np.float64]:
    """Uniform phase-shifter voltage grid including both ends."""
    if n_points < 2:
        raise ConfigurationError(f"n_points must be >= 2, got {n_points}")
    return np.linspace(v_start, v_end, n_points)


def measure_power(
    true_power: ArrayLike,
    spec: NoiseSpec,
    rng: np.random.Generator,
    full_scale: float = 1.0,
    n_samples: int = 1,
) -> NDArray[np.float64] | float:
    """Photodiode readout: truth plus Gaussian noise, averaged over samples."""
    p = np.asarray(true_power, dtype=float)
    if spec.measurement_sigma == 0:
        return float(p) if p.ndim == 0 else p.copy()
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    sigma = spec.measurement_sigma * full_scale
    draws = rng.normal(0.0, sigma, size=(n_samples,) + p.shape)
    out = p + draws.mean(axis=0)
    return float(out) if out.ndim == 0 else out


def quantize_voltage(v: ArrayLike, dac_bits: int, v_max: float) -> NDArray[np.float64] | float:
    """Nearest of ``2**dac_bits`` uniform levels spanning ``[0, v_max]``.

    Out-of-range inputs are clamped and a :class:`DACClampWarning` is issued.
    """
    x = np.asarray(v, dtype=float)
    if np.any((x < 0) | (x > v_max)):
        warnings.warn(f"voltage outside [0, {v_max}] V clamped", DACClampWarning, stacklevel=2)
        x = np.clip(x, 0.0, v_max)
    levels = 2**dac_bits - 1
    q = np.round(x / v_max * levels) * (v_max / levels)
    q = np.minimum(q, v_max)
    return float(q) if q.ndim == 0 else q


def dac_step(dac_bits: int, v_max: float) -> float:
    return v_max / (2**dac_bits - 1)


@dataclass
class EnvironmentState:
    """Instantaneous conditions seen by the chip.

    ``temperature`` is the programmed (Peltier) set point; the chip itself
    sits at ``temperature + ambient``.
    """

    temperature: float = T_REF_C
    vp: float = 0.0
    time_index: int = 0
    ambient: float = 0.0

    @property
    def chip_temperature(self) -> float:
        return self.temperature + self.ambient


@dataclass
class Environment:
    """Seeded disturbance process stepping through a programmed schedule."""

    spec: NoiseSpec
    seed: int = 0
    t0: float = T_REF_C
    state: EnvironmentState = field(init=False)
    schedule_temperature: NDArray[np.float64] = field(init=False, repr=False)
    schedule_vp: NDArray[np.float64] = field(init=False, repr=False)
    ambient: NDArray[np.float64] = field(init=False, repr=False)
    measurement_rng: np.random.Generator = field(init=False, repr=False)
    offset_rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        walk_ss, ambient_ss, meas_ss, offset_ss = np.random.SeedSequence(self.seed).spawn(4)
        spec = self.spec
        n = spec.n_steps
        temps = np.full(n + 1, self.t0)
        vps = np.zeros(n + 1)
        if spec.kind is NoiseKind.TEMPERATURE_WALK:
            temps[1:] = gen_temperature_walk(spec, np.random.default_rng(walk_ss), self.t0)
        elif spec.kind is NoiseKind.CROSSTALK_SWEEP:
            if n < 1:
                raise ConfigurationError("crosstalk sweep needs n_steps >= 1")
            vps = gen_crosstalk_sweep(
                spec.sweep_start, spec.sweep_start + spec.step_size * n, n + 1
            )
        self.schedule_temperature = temps
        self.schedule_vp = vps
        self.ambient = np.random.default_rng(ambient_ss).normal(
            0.0, spec.ambient_sigma, size=n + 1
        ) if spec.ambient_sigma > 0 else np.zeros(n + 1)
        self.measurement_rng = np.random.default_rng(meas_ss)
        self.offset_rng = np.random.default_rng(offset_ss)
        self.state = self._state_at(0)

    def _state_at(self, k: int) -> EnvironmentState:
        return EnvironmentState(
            temperature=float(self.schedule_temperature[k]),
            vp=float(self.schedule_vp[k]),
            time_index=k,
            ambient=float(self.ambient[k]),
        )

    @property
    def n_steps(self) -> int:
        return self.spec.n_steps

    def step(self) -> EnvironmentState:
        """Advance one step and return the new state."""
        k = self.state.time_index + 1
        if k > self.spec.n_steps:
            raise IndexError("environment schedule exhausted")
        self.state = self._state_at(k)
        return self.state

    def states(self) -> list[EnvironmentState]:
        return [self._state_at(k) for k in range(self.spec.n_steps + 1)]

    def measure(self, true_power: ArrayLike, n_samples: int = 1):
        return measure_power(true_power, self.spec, self.measurement_rng, 1.0, n_samples)

    def quantize(self, volts: ArrayLike) -> NDArray[np.float64]:
        v = np.asarray(volts, dtype=float)
        if self.spec.dac_bits is None:
            return np.clip(v, 0.0, None)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DACClampWarning)
            return np.asarray(quantize_voltage(v, self.spec.dac_bits, self.spec.v_max))


def apply_static_offsets(device, sigma_pm: float, rng: np.random.Generator):
    """Copy of ``device`` with each cold resonance shifted by N(0, sigma_pm)."""
    shifts = rng.normal(0.0, sigma_pm, size=device.n_rings)
    rings = [replace(r, lambda0=r.lambda0 + s / 1000.0) for r, s in zip(device.rings, shifts)]
    return device.with_rings(rings)
