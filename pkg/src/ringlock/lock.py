"""Closed-loop resonance locking on the pump monitor.

The controller never sees ring wavelengths. It only reads the summed
through-port pump power of the generation rings, which is smallest when
every ring sits on the laser, and drives the heaters with the simplex
minimizer. Wavelengths and detunings recorded here come from the simulated
plant and are used for scoring only.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ringlock.environment import (
    ConfigurationError,
    Environment,
    EnvironmentState,
    NoiseKind,
    NoiseSpec,
)
from ringlock.resonator import (
    PM_PER_NM,
    DeviceModel,
    InfeasibleAlignment,
    analytic_alignment,
    notch_power,
)
from ringlock.simplex import SimplexConfig, fit_curve, minimize


class LockMode(str, enum.Enum):
    IN_SITU = "in_situ"
    TUNING_CURVE_BASELINE = "tuning_curve_baseline"
    UNCORRECTED = "uncorrected"


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LockConfig:
    """Controller settings.

    ``samples_per_eval`` photodiode samples are averaged into every objective
    evaluation. ``acquire_threshold`` is the summed monitor reading above
    which a converged simplex is taken to have missed the resonance and the
    controller restarts with a cold-sized simplex.
    """

    init_means: tuple[float, ...] = (3.60, 3.56)
    init_sigma: float = 0.2
    success_detuning_tol: float = 1.0
    cold_scale: float = 0.2
    warm_start_scale: float = 0.05
    per_step_budget: int = 100
    max_iterations: int = 200
    lock_mode: LockMode = LockMode.IN_SITU
    samples_per_eval: int = 128
    acquire_threshold: float = 0.05
    f_tol: float = 1e-6
    x_tol: float = 1e-4

    def __post_init__(self) -> None:
        object.__setattr__(self, "lock_mode", LockMode(self.lock_mode))
        object.__setattr__(self, "init_means", tuple(float(v) for v in self.init_means))
        if not self.success_detuning_tol > 0:
            raise ConfigurationError("success_detuning_tol must be > 0")
        if self.per_step_budget < len(self.init_means) + 1:
            raise ConfigurationError("per_step_budget must be >= N + 1")
        if self.init_sigma < 0:
            raise ConfigurationError("init_sigma must be >= 0")
        if self.samples_per_eval < 1:
            raise ConfigurationError("samples_per_eval must be >= 1")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if not (self.cold_scale > 0 and self.warm_start_scale > 0):
            raise ConfigurationError("simplex scales must be > 0")


class Plant:
    """The simulated chip as seen through the DAC and the photodiodes."""

    def __init__(
        self,
        device: DeviceModel,
        spec: NoiseSpec,
        state: EnvironmentState,
        rng: np.random.Generator,
        samples_per_eval: int = 1,
    ) -> None:
        self.device = device
        self.spec = spec
        self.state = state
        self.rng = rng
        self.samples = samples_per_eval
        self._m = device.tuning_matrix()
        self._l0_pm = (np.array([r.lambda0 for r in device.rings]) - device.lambda_laser) * PM_PER_NM
        self._dldt = np.array([r.dlambda_dT for r in device.rings])
        self._width = device.gamma_width
        self.n_reads = 0

    @property
    def noise_sigma(self) -> float:
        """Standard deviation of one summed, averaged reading."""
        n = self.device.n_rings
        return self.spec.measurement_sigma * math.sqrt(n / self.samples)

    def apply(self, volts: ArrayLike) -> NDArray[np.float64]:
        v = np.clip(np.asarray(volts, dtype=float), 0.0, self.spec.v_max)
        if self.spec.dac_bits is None:
            return v
        levels = 2**self.spec.dac_bits - 1
        return np.round(v / self.spec.v_max * levels) * (self.spec.v_max / levels)

    def detunings(self, volts: ArrayLike) -> NDArray[np.float64]:
        """True ring-minus-laser detunings [pm] at the applied voltages."""
        v = self.apply(volts)
        s = self.state
        return (
            self._l0_pm
            + self._m @ (v * v)
            + self.device.phase_crosstalk * s.vp**2
            + self._dldt * (s.chip_temperature - self.device.t_ref)
        )

    def wavelengths(self, volts: ArrayLike) -> NDArray[np.float64]:
        return self.device.lambda_laser + self.detunings(volts) / PM_PER_NM

    def read(self, volts: ArrayLike) -> float:
        """Summed pump monitor power, noisy and averaged."""
        self.n_reads += 1
        p = notch_power(self.detunings(volts), self._width)
        sigma = self.spec.measurement_sigma
        if sigma > 0:
            noise = self.rng.normal(0.0, sigma, size=(self.samples, p.size)).mean(axis=0)
            p = p + noise
        return float(np.sum(p))

    def locked_reading(self, tol_pm: float) -> float:
        """Noiseless reading that guarantees every ring within ``tol_pm``."""
        return float(np.min(notch_power(tol_pm, self._width)))


@dataclass
class LockResult:
    volts: NDArray[np.float64]
    n_iterations: int
    n_evals: int
    success: bool
    residual_detunings: NDArray[np.float64]
    objective_final: float
    start: NDArray[np.float64] | None = None
    trace: list[tuple[NDArray[np.float64], float]] = field(default_factory=list)


def _simplex_config(cfg: LockConfig, plant: Plant, scale: float, **kw) -> SimplexConfig:
    n = plant.device.n_rings
    return SimplexConfig(
        initial_scale=scale,
        f_tol=cfg.f_tol,
        x_tol=cfg.x_tol,
        lower=tuple([0.0] * n),
        upper=tuple([plant.spec.v_max] * n),
        **kw,
    )


def _already_locked(plant: Plant, cfg: LockConfig, reading: float) -> bool:
    return reading + 3.0 * plant.noise_sigma <= plant.locked_reading(cfg.success_detuning_tol)


def align(
    plant: Plant,
    x0: ArrayLike,
    cfg: LockConfig,
    record_trace: bool = False,
) -> LockResult:
    """Lock ``plant`` starting from heater voltages ``x0``.

    Runs the simplex on the monitor reading, then restarts from the optimum
    until a restart no longer moves it, all within ``cfg.max_iterations``
    simplex iterations. A restart uses the cold simplex size when the
    monitor still reads far from resonance and the warm size otherwise.
    """
    x = plant.apply(x0)
    start = x.copy()
    evals = 1
    reading = plant.read(x)
    iterations = 0
    trace: list[tuple[NDArray[np.float64], float]] = []
    if not _already_locked(plant, cfg, reading):
        scale = cfg.cold_scale
        while iterations < cfg.max_iterations:
            sc = _simplex_config(
                cfg,
                plant,
                scale,
                max_evals=10_000,
                max_iter=cfg.max_iterations - iterations,
                record_trace=record_trace,
            )
            res = minimize(plant.read, x, sc)
            iterations += res.n_iter
            evals += res.n_evals
            # each run restates its starting vertex; keep only the first
            trace.extend(res.trace if not trace else res.trace[1:])
            moved = float(np.max(np.abs(res.x_best - x)))
            x = plant.apply(res.x_best)
            reading = plant.read(x)
            evals += 1
            if reading > cfg.acquire_threshold:
                scale = cfg.cold_scale
                continue
            if moved < 0.5 * cfg.warm_start_scale:
                break
            scale = cfg.warm_start_scale
    residual = plant.detunings(x)
    success = bool(
        np.max(np.abs(residual)) <= cfg.success_detuning_tol
        and iterations <= cfg.max_iterations
    )
    return LockResult(x, iterations, evals, success, residual, reading, start, trace)


def static_align(
    device: DeviceModel,
    env: Environment | None,
    cfg: LockConfig | None = None,
    seed: int | None = None,
    x0: ArrayLike | None = None,
    record_trace: bool = False,
) -> LockResult:
    """One cold-start alignment at the environment's current state.

    Initial voltages are drawn from ``Normal(cfg.init_means, cfg.init_sigma)``
    with ``seed`` unless ``x0`` is given.

    Raises
    ------
    InfeasibleAlignment
        If no non-negative voltages can align the device.
    """
    cfg = cfg or LockConfig()
    env = env if env is not None else Environment(NoiseSpec(), seed or 0)
    state = env.state
    analytic_alignment(device, state.chip_temperature, state.vp)
    if x0 is None:
        if len(cfg.init_means) != device.n_rings:
            raise ConfigurationError(
                f"init_means has {len(cfg.init_means)} entries for {device.n_rings} rings"
            )
        rng = np.random.default_rng(seed)
        x0 = rng.normal(cfg.init_means, cfg.init_sigma)
    plant = Plant(device, env.spec, state, env.measurement_rng, cfg.samples_per_eval)
    return align(plant, x0, cfg, record_trace)


@dataclass(frozen=True)
class TuningCurves:
    """Pre-determined heater voltages versus temperature or phase voltage.

    ``coeffs[i]`` are the polynomial coefficients of ring ``i``, highest
    power first.
    """

    variable: str
    coeffs: tuple[tuple[float, ...], ...]

    def __post_init__(self) -> None:
        if self.variable not in ("temperature", "phase"):
            raise ValueError(f"unknown tuning-curve variable {self.variable!r}")
        object.__setattr__(
            self, "coeffs", tuple(tuple(float(c) for c in row) for row in self.coeffs)
        )

    def __call__(self, x: float) -> NDArray[np.float64]:
        return tuning_curve_voltages(x, self)


# Curves measured on the characterized chip.
CHIP_TEMPERATURE_CURVES = TuningCurves(
    "temperature", ((-0.06090, 5.568), (-0.06166, 5.546))
)
CHIP_PHASE_CURVES = TuningCurves(
    "phase", ((-0.0007192, -0.0003439, 3.746), (-0.0008414, -0.000576, 3.702))
)


def tuning_curve_voltages(x: float, curves: TuningCurves) -> NDArray[np.float64]:
    """Evaluate every ring's curve at ``x`` and clamp to non-negative volts."""
    return np.array([max(0.0, float(np.polyval(c, x))) for c in curves.coeffs])


@dataclass(frozen=True)
class CalibrationSweep:
    variable: str = "temperature"
    start: float = 30.0
    stop: float = 31.0
    n_points: int = 11
    repeats: int = 5

    def __post_init__(self) -> None:
        if self.variable not in ("temperature", "phase"):
            raise ConfigurationError(f"unknown sweep variable {self.variable!r}")
        if self.n_points < 2:
            raise ConfigurationError("calibration sweep needs >= 2 points")
        if self.stop == self.start:
            raise ConfigurationError("calibration sweep has zero width")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")

    @classmethod
    def phase(cls, **kw) -> "CalibrationSweep":
        base = dict(variable="phase", start=0.0, stop=6.5, n_points=14)
        base.update(kw)
        return cls(**base)


@dataclass
class Calibration:
    curves: TuningCurves
    per_repeat: list[TuningCurves]
    xs: NDArray[np.float64]
    volts: NDArray[np.float64]
    ok: NDArray[np.bool_]


def _linear(x, a, b):
    return a * x + b


def _quadratic(x, a, b, c):
    return (a * x + b) * x + c


def _fit_rings(variable: str, xs: NDArray, volts: NDArray) -> TuningCurves:
    rows = []
    for i in range(volts.shape[1]):
        y = volts[:, i]
        lo, hi = np.argmin(xs), np.argmax(xs)
        slope = (y[hi] - y[lo]) / (xs[hi] - xs[lo])
        if variable == "temperature":
            res = fit_curve(_linear, (slope, y[lo] - slope * xs[lo]), xs, y)
        else:
            res = fit_curve(_quadratic, (0.0, slope, y[lo] - slope * xs[lo]), xs, y)
        rows.append(tuple(res.x_best))
    return TuningCurves(variable, tuple(rows))


def calibrate_tuning_curves(
    device: DeviceModel,
    sweep: CalibrationSweep,
    seed: int = 0,
    noise: NoiseSpec | None = None,
    cfg: LockConfig | None = None,
) -> Calibration:
    """Sweep the environment, align at every point and fit tuning curves.

    Each repeat walks the sweep in order, starting at ``cfg.init_means`` and
    warm-starting every later point from the previous solution. Points whose
    alignment fails are dropped; more than half failing is an error.
    """
    cfg = cfg or LockConfig()
    noise = noise or NoiseSpec()
    grid = np.linspace(sweep.start, sweep.stop, sweep.n_points)
    streams = np.random.SeedSequence([seed, 0xCA1]).spawn(sweep.repeats)
    xs, volts, ok, per_repeat = [], [], [], []
    for ss in streams:
        meas_ss, amb_ss = ss.spawn(2)
        meas_rng = np.random.default_rng(meas_ss)
        amb = np.random.default_rng(amb_ss).normal(0.0, noise.ambient_sigma, size=grid.size)
        x = np.array(cfg.init_means, dtype=float)
        rep_x, rep_v = [], []
        for k, g in enumerate(grid):
            if sweep.variable == "temperature":
                state = EnvironmentState(temperature=float(g), ambient=float(amb[k]))
            else:
                state = EnvironmentState(vp=float(g), ambient=float(amb[k]))
            plant = Plant(device, noise, state, meas_rng, cfg.samples_per_eval)
            res = align(plant, x, cfg)
            xs.append(g)
            volts.append(res.volts)
            ok.append(res.success)
            if res.success:
                x = res.volts
                rep_x.append(g)
                rep_v.append(res.volts)
        if len(rep_x) >= 3:
            per_repeat.append(_fit_rings(sweep.variable, np.array(rep_x), np.array(rep_v)))
    xs_a, v_a, ok_a = np.array(xs), np.array(volts), np.array(ok)
    if ok_a.mean() < 0.5:
        raise CalibrationError(
            f"{np.count_nonzero(~ok_a)} of {ok_a.size} calibration alignments failed"
        )
    curves = _fit_rings(sweep.variable, xs_a[ok_a], v_a[ok_a])
    return Calibration(curves, per_repeat, xs_a, v_a, ok_a)


@dataclass
class StepRecord:
    time_index: int
    temperature: float
    chip_temperature: float
    vp: float
    volts: NDArray[np.float64]
    wavelengths_nm: NDArray[np.float64]
    detunings_pm: NDArray[np.float64]
    n_evals: int = 0
    budget_exhausted: bool = False


@dataclass
class StabilityRecord:
    mode: LockMode
    steps: list[StepRecord]
    gamma_width: float
    lambda_laser: float

    def wavelengths_pm(self) -> NDArray[np.float64]:
        """Ring wavelengths relative to the laser [pm], one row per step."""
        return np.array([(s.wavelengths_nm - self.lambda_laser) * PM_PER_NM for s in self.steps])

    def volts(self) -> NDArray[np.float64]:
        return np.array([s.volts for s in self.steps])


@dataclass
class StabilitySummary:
    std_pm: NDArray[np.float64]
    peak_to_peak_pm: NDArray[np.float64]
    total_variation_pm: NDArray[np.float64]
    fractional_drift: NDArray[np.float64]
    improvement: NDArray[np.float64] | None = None
    n_out_of_tol: int = 0
    n_budget_exhausted: int = 0

    @property
    def improvement_factor(self) -> float:
        """Worst-ring ratio of reference total variation to this run's std."""
        if self.improvement is None:
            return float("nan")
        return float(np.min(self.improvement))

    def as_dict(self) -> dict:
        out = {
            "std_pm": self.std_pm.tolist(),
            "peak_to_peak_pm": self.peak_to_peak_pm.tolist(),
            "total_variation_pm": self.total_variation_pm.tolist(),
            "fractional_drift": self.fractional_drift.tolist(),
            "n_out_of_tol": self.n_out_of_tol,
            "n_budget_exhausted": self.n_budget_exhausted,
        }
        if self.improvement is not None:
            out["improvement"] = self.improvement.tolist()
            out["improvement_factor"] = self.improvement_factor
        return out


def summarize_wavelengths(
    wavelengths_pm: ArrayLike,
    gamma_width: float,
    reference_variation: ArrayLike | None = None,
) -> StabilitySummary:
    """Spread metrics of a (steps x rings) wavelength trajectory [pm]."""
    w = np.asarray(wavelengths_pm, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    if w.shape[0] == 0:
        raise ValueError("empty trajectory")
    std = w.std(axis=0)
    ptp = w.max(axis=0) - w.min(axis=0)
    total = np.abs(w[-1] - w[0])
    improvement = None
    if reference_variation is not None:
        ref = np.broadcast_to(np.asarray(reference_variation, dtype=float), std.shape)
        with np.errstate(divide="ignore"):
            improvement = np.where(std > 0, ref / np.where(std > 0, std, 1.0), np.inf)
    return StabilitySummary(std, ptp, total, std / gamma_width, improvement)


def stability_summary(
    record: StabilityRecord,
    reference: StabilityRecord | None = None,
    tol_pm: float | None = None,
) -> StabilitySummary:
    """Per-ring std, peak-to-peak, net variation and drift in linewidths.

    With a paired ``reference`` (normally the uncorrected run) the
    improvement factor is the reference's net variation over this run's std.
    """
    if not record.steps:
        raise ValueError("stability record is empty")
    ref_var = None
    if reference is not None:
        ref_var = summarize_wavelengths(reference.wavelengths_pm(), reference.gamma_width).total_variation_pm
    out = summarize_wavelengths(record.wavelengths_pm(), record.gamma_width, ref_var)
    if tol_pm is not None:
        det = np.array([s.detunings_pm for s in record.steps])
        out.n_out_of_tol = int(np.count_nonzero(np.max(np.abs(det), axis=1) > tol_pm))
    out.n_budget_exhausted = sum(s.budget_exhausted for s in record.steps)
    return out


def default_calibration_sweep(noise: NoiseSpec, t0: float) -> CalibrationSweep:
    if noise.kind is NoiseKind.CROSSTALK_SWEEP:
        stop = noise.sweep_start + noise.step_size * noise.n_steps
        return CalibrationSweep.phase(start=noise.sweep_start, stop=stop, n_points=noise.n_steps + 1)
    lo = t0 + min(0.0, noise.net_drift)
    hi = t0 + max(0.0, noise.net_drift)
    if hi == lo:
        hi = lo + 1.0
    return CalibrationSweep("temperature", lo, hi, 11)


def dynamic_lock(
    device: DeviceModel,
    noise: NoiseSpec,
    cfg: LockConfig | None = None,
    seed: int = 0,
    curves: TuningCurves | None = None,
    t0: float | None = None,
) -> StabilityRecord:
    """Track the device through the environment schedule of ``noise``.

    The initial state is aligned from a cold start. Every later step first
    moves the environment, then, depending on ``cfg.lock_mode``, re-locks
    with a warm-started simplex, sets the heaters from the tuning curves, or
    leaves them alone. Runs with equal ``seed`` share the environment
    realization and the initial alignment.
    """
    cfg = cfg or LockConfig()
    t0 = device.t_ref if t0 is None else t0
    env = Environment(noise, seed, t0)
    mode = cfg.lock_mode
    if mode is LockMode.TUNING_CURVE_BASELINE and curves is None:
        sweep = default_calibration_sweep(noise, t0)
        curves = calibrate_tuning_curves(device, sweep, seed, noise, cfg).curves

    def curve_volts(state: EnvironmentState) -> NDArray[np.float64]:
        x = state.temperature if curves.variable == "temperature" else state.vp
        return tuning_curve_voltages(x, curves)

    plant = Plant(device, noise, env.state, env.measurement_rng, cfg.samples_per_eval)
    steps: list[StepRecord] = []
    if mode is LockMode.TUNING_CURVE_BASELINE:
        volts = plant.apply(curve_volts(env.state))
        evals = 0
    else:
        first = static_align(device, env, cfg, seed=seed)
        volts, evals = first.volts, first.n_evals

    def record(state: EnvironmentState, v, n_evals: int, exhausted: bool) -> None:
        plant.state = state
        steps.append(
            StepRecord(
                time_index=state.time_index,
                temperature=state.temperature,
                chip_temperature=state.chip_temperature,
                vp=state.vp,
                volts=np.array(v),
                wavelengths_nm=plant.wavelengths(v),
                detunings_pm=plant.detunings(v),
                n_evals=n_evals,
                budget_exhausted=exhausted,
            )
        )

    record(env.state, volts, evals, False)
    for _ in range(env.n_steps):
        state = env.step()
        plant.state = state
        exhausted = False
        evals = 0
        if mode is LockMode.IN_SITU:
            reading = plant.read(volts)
            evals = 1
            if not _already_locked(plant, cfg, reading):
                sc = _simplex_config(cfg, plant, cfg.warm_start_scale, max_evals=cfg.per_step_budget - 1)
                res = minimize(plant.read, volts, sc)
                evals += res.n_evals
                exhausted = not res.converged
                volts = plant.apply(res.x_best)
        elif mode is LockMode.TUNING_CURVE_BASELINE:
            volts = plant.apply(curve_volts(state))
        record(state, volts, evals, exhausted)
    return StabilityRecord(mode, steps, float(np.mean(device.gamma_width)), device.lambda_laser)


def paired_dynamic_lock(
    device: DeviceModel,
    noise: NoiseSpec,
    cfg: LockConfig | None = None,
    seed: int = 0,
    modes: Sequence[LockMode] = tuple(LockMode),
    curves: TuningCurves | None = None,
) -> dict[LockMode, StabilityRecord]:
    """Run several lock modes on the same environment realization."""
    cfg = cfg or LockConfig()
    return {
        m: dynamic_lock(device, noise, replace(cfg, lock_mode=m), seed, curves)
        for m in modes
    }


__all__ = [
    "CHIP_PHASE_CURVES",
    "CHIP_TEMPERATURE_CURVES",
    "Calibration",
    "CalibrationError",
    "CalibrationSweep",
    "InfeasibleAlignment",
    "LockConfig",
    "LockMode",
    "LockResult",
    "Plant",
    "StabilityRecord",
    "StabilitySummary",
    "StepRecord",
    "TuningCurves",
    "align",
    "calibrate_tuning_curves",
    "dynamic_lock",
    "paired_dynamic_lock",
    "stability_summary",
    "static_align",
    "summarize_wavelengths",
    "tuning_curve_voltages",
]
