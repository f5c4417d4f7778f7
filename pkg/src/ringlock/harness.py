"""Scenario configuration, deterministic orchestration and result files.

A scenario is fully determined by its configuration document and seed. Runs
write one CSV table per record type, each starting with a
``# config_hash=... seed=...`` comment line, plus a ``summary.json`` with the
echoed configuration, its hash, the summary metrics and the outcome of the
acceptance checks.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import json
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ringlock import quantum as q
from ringlock.environment import (
    ConfigurationError,
    EnvironmentState,
    Environment,
    NoiseKind,
    NoiseSpec,
)
from ringlock.lock import (
    CalibrationSweep,
    LockConfig,
    LockMode,
    Plant,
    align,
    calibrate_tuning_curves,
    paired_dynamic_lock,
    stability_summary,
    static_align,
)
from ringlock.resonator import (
    DEFAULT_LAMBDA0_NM,
    CROSS_TUNE_PM_V2,
    LASER_NM,
    LINEWIDTH_PM,
    PHASE_CROSSTALK_PM_V2,
    SELF_TUNE_PM_V2,
    T_REF_C,
    THERMAL_PM_PER_C,
    DeviceModel,
    InfeasibleAlignment,
    RingParams,
    Topology,
    classify_critical_points,
    random_device,
)

SCHEMA_VERSION = 1


class ScenarioName(str, enum.Enum):
    STATIC_ALIGN = "StaticAlign"
    TEMP_WALK_LOCK = "TempWalkLock"
    CROSSTALK_LOCK = "CrosstalkLock"
    TUNING_CURVE_CAL = "TuningCurveCal"
    FRINGE_SWEEP = "FringeSweep"
    POWER_SWEEP = "PowerSweep"
    CRITICAL_POINT_AUDIT = "CriticalPointAudit"


class ConfigError(ValueError):
    """Invalid configuration document; ``errors`` lists ``(path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]) -> None:
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


class RunFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class DeviceConfig:
    """Two-ring chip constants in document form (pm, nm, V, degC)."""

    lambda0_nm: tuple[float, ...] = DEFAULT_LAMBDA0_NM
    linewidth_pm: float = LINEWIDTH_PM
    self_tune_pm_v2: tuple[float, ...] = (SELF_TUNE_PM_V2, SELF_TUNE_PM_V2)
    cross_tune_pm_v2: float = CROSS_TUNE_PM_V2
    thermal_pm_per_c: float = THERMAL_PM_PER_C
    phase_crosstalk_pm_v2: tuple[float, ...] = (PHASE_CROSSTALK_PM_V2, PHASE_CROSSTALK_PM_V2)
    topology: str = Topology.PARALLEL.value
    lambda_laser_nm: float = LASER_NM
    t_ref_c: float = T_REF_C

    def errors(self) -> list[tuple[str, str]]:
        out = []
        n = len(self.lambda0_nm)
        if n < 1:
            out.append(("lambda0_nm", "needs at least one ring"))
        for name in ("self_tune_pm_v2", "phase_crosstalk_pm_v2"):
            if len(getattr(self, name)) != n:
                out.append((name, f"has {len(getattr(self, name))} entries for {n} rings"))
        if not self.linewidth_pm > 0:
            out.append(("linewidth_pm", f"must be > 0, got {self.linewidth_pm}"))
        if any(not g > 0 for g in self.self_tune_pm_v2):
            out.append(("self_tune_pm_v2", "entries must be > 0"))
        if self.cross_tune_pm_v2 < 0:
            out.append(("cross_tune_pm_v2", "must be >= 0"))
        if any(p < 0 for p in self.phase_crosstalk_pm_v2):
            out.append(("phase_crosstalk_pm_v2", "entries must be >= 0"))
        if self.topology not in {t.value for t in Topology}:
            out.append(("topology", f"unknown topology {self.topology!r}"))
        return out

    def build(self) -> DeviceModel:
        n = len(self.lambda0_nm)
        rings = tuple(
            RingParams(
                lambda0=l0,
                gamma_width=self.linewidth_pm,
                gamma_tune=g,
                dlambda_dT=self.thermal_pm_per_c,
            )
            for l0, g in zip(self.lambda0_nm, self.self_tune_pm_v2)
        )
        return DeviceModel(
            rings=rings,
            cross_tune=self.cross_tune_pm_v2 * (np.ones((n, n)) - np.eye(n)),
            phase_crosstalk=np.array(self.phase_crosstalk_pm_v2),
            topology=Topology(self.topology),
            lambda_laser=self.lambda_laser_nm,
            t_ref=self.t_ref_c,
        )


@dataclass(frozen=True)
class QuantumConfig:
    """Pair source, detection and sweep settings for fringe and power runs.

    ``self_heating_pm_per_uw`` shifts both rings red with pump power, which
    the lock has to follow during a power sweep.
    """

    beta: float = q.PHASE_PER_V2
    phi0: float = 0.0
    detector_eff: float = q.DETECTOR_EFFICIENCY
    brightness_exponent: int = q.BRIGHTNESS_EXPONENT
    max_pair_rate_hz: float = q.MAX_PAIR_RATE_HZ
    max_power_uw: float = 300.0
    fringe_power_uw: float = 300.0
    p_sat_uw: float | None = q.SATURATION_POWER_UW
    integration_time_s: float = 2.0
    poisson: bool = True
    vp_max: float = 6.5
    n_points: int = 27
    lock_tol_pm: float = 0.1
    power_min_uw: float = 20.0
    n_power_points: int = 15
    self_heating_pm_per_uw: float = 0.1
    roundtrip_seeds: int = 50
    conservation_draws: int = 100_000

    def errors(self) -> list[tuple[str, str]]:
        out = []
        if not self.beta > 0:
            out.append(("beta", "must be > 0"))
        if not 0 <= self.detector_eff <= 1:
            out.append(("detector_eff", "must be in [0, 1]"))
        for name in ("max_pair_rate_hz", "max_power_uw", "fringe_power_uw",
                     "integration_time_s", "vp_max", "lock_tol_pm", "power_min_uw"):
            if not getattr(self, name) > 0:
                out.append((name, "must be > 0"))
        if self.p_sat_uw is not None and not self.p_sat_uw > 0:
            out.append(("p_sat_uw", "must be > 0 or null"))
        if self.n_points < 4:
            out.append(("n_points", "fringe needs at least 4 points"))
        if self.n_power_points < 2:
            out.append(("n_power_points", "must be >= 2"))
        if self.power_min_uw >= self.max_power_uw:
            out.append(("power_min_uw", "must be below max_power_uw"))
        if self.roundtrip_seeds < 0 or self.conservation_draws < 0:
            out.append(("roundtrip_seeds", "counts must be >= 0"))
        return out


@dataclass(frozen=True)
class CalibrationConfig:
    temperature_span_c: float = 1.0
    temperature_points: int = 11
    phase_stop_v: float = 6.5
    phase_points: int = 14
    repeats: int = 5

    def errors(self) -> list[tuple[str, str]]:
        out = []
        if self.temperature_span_c == 0:
            out.append(("temperature_span_c", "zero-width sweep"))
        if self.phase_stop_v <= 0:
            out.append(("phase_stop_v", "must be > 0"))
        for name in ("temperature_points", "phase_points"):
            if getattr(self, name) < 3:
                out.append((name, "must be >= 3"))
        if self.repeats < 1:
            out.append(("repeats", "must be >= 1"))
        return out


@dataclass(frozen=True)
class AuditConfig:
    """``n_devices = 0`` audits the configured device; more draws random ones."""

    n_starts: int = 100
    n_devices: int = 0
    box_v: tuple[float, float] = (0.0, 6.0)
    cluster_tol_v: float = 1e-3

    def errors(self) -> list[tuple[str, str]]:
        out = []
        if self.n_starts < 1:
            out.append(("n_starts", "sampling spec is empty"))
        if self.n_devices < 0:
            out.append(("n_devices", "must be >= 0"))
        if len(self.box_v) != 2 or not self.box_v[1] > self.box_v[0]:
            out.append(("box_v", "must be [low, high] with high > low"))
        if not self.cluster_tol_v > 0:
            out.append(("cluster_tol_v", "must be > 0"))
        return out


def _noise_defaults(name: ScenarioName) -> NoiseSpec:
    if name is ScenarioName.TEMP_WALK_LOCK:
        return NoiseSpec(kind=NoiseKind.TEMPERATURE_WALK)
    if name is ScenarioName.CROSSTALK_LOCK:
        return NoiseSpec(kind=NoiseKind.CROSSTALK_SWEEP, step_size=0.25, n_steps=26)
    return NoiseSpec()


@dataclass(frozen=True)
class Scenario:
    name: ScenarioName = ScenarioName.STATIC_ALIGN
    seed: int = 0
    repeats: int = 1
    device: DeviceConfig = DeviceConfig()
    noise: NoiseSpec = NoiseSpec()
    lock: LockConfig = LockConfig()
    quantum: QuantumConfig = QuantumConfig()
    calibration: CalibrationConfig = CalibrationConfig()
    audit: AuditConfig = AuditConfig()

    def to_dict(self) -> dict[str, Any]:
        doc = _plain(dataclasses.asdict(self))
        doc["scenario"] = doc.pop("name")
        return {"version": SCHEMA_VERSION, **doc}

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def _plain(obj: Any) -> Any:
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(doc: dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a configuration document."""
    canon = json.dumps(_plain(doc), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


_SECTIONS: dict[str, type] = {
    "device": DeviceConfig,
    "noise": NoiseSpec,
    "lock": LockConfig,
    "quantum": QuantumConfig,
    "calibration": CalibrationConfig,
    "audit": AuditConfig,
}
_TOP_LEVEL = {"version", "scenario", "seed", "repeats", *_SECTIONS}


def _default_repeats(name: ScenarioName) -> int:
    return 100 if name is ScenarioName.STATIC_ALIGN else 1


def _coerce(value: Any, default: Any) -> Any:
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(default, bool) or isinstance(value, bool):
        return value
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    return value


def _type_ok(value: Any, default: Any) -> bool:
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, (int, float)) and not isinstance(default, enum.Enum):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, (tuple, list)):
        return isinstance(value, (list, tuple))
    if isinstance(default, str):
        return isinstance(value, str)
    return True


def _build_section(
    key: str, cls: type, base: Any, doc: dict[str, Any], errors: list[tuple[str, str]]
) -> Any:
    if not isinstance(doc, dict):
        errors.append((key, "must be an object"))
        return base
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for k, v in doc.items():
        if k not in known:
            errors.append((f"{key}.{k}", "unknown key"))
            continue
        default = getattr(base, k)
        if not _type_ok(v, default):
            errors.append((f"{key}.{k}", f"expected {type(default).__name__}, got {v!r}"))
            continue
        if isinstance(default, enum.Enum):
            try:
                v = type(default)(v)
            except ValueError:
                allowed = ", ".join(e.value for e in type(default))
                errors.append((f"{key}.{k}", f"{v!r} is not one of: {allowed}"))
                continue
        kwargs[k] = _coerce(v, default)
    try:
        obj = replace(base, **kwargs)
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        head = msg.split(" ", 1)[0]
        path = f"{key}.{head}" if head in known else key
        errors.append((path, msg))
        return base
    check = getattr(obj, "errors", None)
    if check is not None:
        errors.extend((f"{key}.{p}", m) for p, m in check())
    return obj


def parse_config(doc: dict[str, Any], name: ScenarioName | str | None = None) -> Scenario:
    """Validate a configuration document and fill every default.

    ``name`` overrides the document's scenario. All problems are collected
    and raised together as a :class:`ConfigError`.
    """
    errors: list[tuple[str, str]] = []
    if not isinstance(doc, dict):
        raise ConfigError([("", "configuration must be an object")])
    for k in doc:
        if k not in _TOP_LEVEL:
            errors.append((k, "unknown key"))
    version = doc.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        errors.append(("version", f"unsupported schema version {version!r}"))
    raw_name = name if name is not None else doc.get("scenario", "StaticAlign")
    try:
        sname = ScenarioName(raw_name)
    except ValueError:
        errors.append(("scenario", f"unknown scenario {raw_name!r}"))
        sname = ScenarioName.STATIC_ALIGN
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append(("seed", f"must be a non-negative integer, got {seed!r}"))
        seed = 0
    repeats = doc.get("repeats", _default_repeats(sname))
    if not isinstance(repeats, int) or isinstance(repeats, bool) or repeats < 1:
        errors.append(("repeats", f"must be a positive integer, got {repeats!r}"))
        repeats = 1
    bases = {k: cls() for k, cls in _SECTIONS.items()}
    bases["noise"] = _noise_defaults(sname)
    built = {
        k: _build_section(k, cls, bases[k], doc.get(k, {}), errors)
        for k, cls in _SECTIONS.items()
    }
    if not errors:
        try:
            device = built["device"].build()
        except ValueError as exc:
            errors.append(("device", str(exc)))
        else:
            if len(built["lock"].init_means) != device.n_rings:
                errors.append(("lock.init_means", f"needs {device.n_rings} entries"))
            if sname in (ScenarioName.FRINGE_SWEEP, ScenarioName.POWER_SWEEP) and device.n_rings != 2:
                errors.append(("device.lambda0_nm", "quantum scenarios need exactly 2 rings"))
    if errors:
        raise ConfigError(errors)
    return Scenario(name=sname, seed=seed, repeats=repeats, **built)


def load_config(path: str | Path | None, name: ScenarioName | str | None = None) -> Scenario:
    """Read a JSON configuration file; ``None`` gives the defaults."""
    if path is None:
        return parse_config({}, name)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([("", f"cannot read {path}: {exc.strerror}")]) from exc
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError([("", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})")]) from exc
    return parse_config(doc, name)


def schema() -> dict[str, Any]:
    """Every configurable field with its default, per section."""
    out: dict[str, Any] = {
        "version": SCHEMA_VERSION,
        "scenario": [s.value for s in ScenarioName],
        "seed": 0,
        "repeats": "100 for StaticAlign, otherwise 1",
    }
    for key, cls in _SECTIONS.items():
        out[key] = _plain(dataclasses.asdict(cls()))
    out["noise_overrides"] = {
        s.value: _plain(dataclasses.asdict(_noise_defaults(s)))
        for s in (ScenarioName.TEMP_WALK_LOCK, ScenarioName.CROSSTALK_LOCK)
    }
    return out


# ---------------------------------------------------------------------------
# running


@dataclass
class Table:
    columns: list[str]
    rows: list[list[Any]] = field(default_factory=list)

    def add(self, *values: Any) -> None:
        self.rows.append([_plain(v) for v in values])


@dataclass
class RunReport:
    scenario: Scenario
    tables: dict[str, Table] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)
    checks: dict[str, dict[str, Any]] = field(default_factory=dict)
    wall_clock_s: float = 0.0
    status: str = "ok"
    error: str | None = None

    @property
    def config(self) -> dict[str, Any]:
        return self.scenario.to_dict()

    @property
    def config_hash(self) -> str:
        return self.scenario.config_hash()

    @property
    def passed(self) -> bool:
        return self.status == "ok" and all(c["passed"] for c in self.checks.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "status": self.status,
            "error": self.error,
            "summary": _plain(self.summary),
            "checks": _plain(self.checks),
            "wall_clock_s": self.wall_clock_s,
        }

    def write(self, out_dir: str | Path) -> list[Path]:
        """Write every table as CSV and the summary as JSON; return the paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        header = f"# config_hash={self.config_hash} seed={self.scenario.seed}\n"
        for name, table in self.tables.items():
            path = out / f"{name}.csv"
            with path.open("w", newline="") as fh:
                fh.write(header)
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(table.columns)
                w.writerows(table.rows)
            written.append(path)
        path = out / "summary.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True) + "\n")
        written.append(path)
        return written


def _check(passed: bool, **detail: Any) -> dict[str, Any]:
    return {"passed": bool(passed), **detail}


def _repeat_seeds(s: Scenario) -> list[int]:
    return [s.seed + i for i in range(s.repeats)]


def _run_static_align(s: Scenario, report: RunReport) -> None:
    device = s.device.build()
    n = device.n_rings
    volts_cols = [f"v{i + 1}" for i in range(n)]
    table = Table(
        ["repeat", "seed"]
        + [f"{c}_start" for c in volts_cols]
        + volts_cols
        + [f"detuning{i + 1}_pm" for i in range(n)]
        + ["iterations", "evaluations", "success"]
    )
    trace = Table(["iteration"] + volts_cols + ["objective"])
    report.tables["static_align"] = table
    report.tables["static_align_trace"] = trace
    results = []
    for i, seed in enumerate(_repeat_seeds(s)):
        env = Environment(s.noise, seed, device.t_ref)
        res = static_align(device, env, s.lock, seed=seed, record_trace=(i == 0))
        results.append(res)
        table.add(i, seed, *res.start, *res.volts, *res.residual_detunings,
                  res.n_iterations, res.n_evals, res.success)
        if i == 0:
            for k, (x, f) in enumerate(res.trace):
                trace.add(k, *x, f)
    ok = [r for r in results if r.success]
    mean_iter = float(np.mean([r.n_iterations for r in ok])) if ok else float("nan")
    report.summary = {
        "repeats": len(results),
        "successes": len(ok),
        "success_rate": len(ok) / len(results),
        "mean_iterations_successful": mean_iter,
        "mean_iterations_all": float(np.mean([r.n_iterations for r in results])),
        "mean_evaluations": float(np.mean([r.n_evals for r in results])),
    }
    report.checks["static_protocol"] = _check(
        report.summary["success_rate"] >= 0.9 and 25 <= mean_iter <= 115,
        success_rate=report.summary["success_rate"],
        mean_iterations=mean_iter,
        thresholds={"success_rate_min": 0.9, "mean_iterations": [25, 115]},
    )


_LOCK_TARGETS = {
    ScenarioName.TEMP_WALK_LOCK: ("dynamic_stabilization", 84.0, 50.0),
    ScenarioName.CROSSTALK_LOCK: ("crosstalk_stabilization", 45.0, 40.0),
}


def _run_lock(s: Scenario, report: RunReport) -> None:
    device = s.device.build()
    n = device.n_rings
    table = Table(
        ["repeat", "seed", "mode", "step", "temperature_c", "chip_temperature_c", "vp"]
        + [f"v{i + 1}" for i in range(n)]
        + [f"lambda{i + 1}_pm" for i in range(n)]
        + [f"detuning{i + 1}_pm" for i in range(n)]
        + ["evaluations", "budget_exhausted"]
    )
    report.tables["lock_trajectory"] = table
    per_repeat = []
    for i, seed in enumerate(_repeat_seeds(s)):
        records = paired_dynamic_lock(device, s.noise, s.lock, seed)
        unc = records[LockMode.UNCORRECTED]
        for mode, rec in records.items():
            rel = rec.wavelengths_pm()
            for k, st in enumerate(rec.steps):
                table.add(i, seed, mode.value, st.time_index, st.temperature,
                          st.chip_temperature, st.vp, *st.volts, *rel[k],
                          *st.detunings_pm, st.n_evals, st.budget_exhausted)
        summaries = {
            mode.value: stability_summary(
                rec, None if mode is LockMode.UNCORRECTED else unc,
                s.lock.success_detuning_tol,
            ).as_dict()
            for mode, rec in records.items()
        }
        insitu = summaries[LockMode.IN_SITU.value]["improvement_factor"]
        base = summaries[LockMode.TUNING_CURVE_BASELINE.value]["improvement_factor"]
        summaries["in_situ_over_baseline"] = insitu / base
        per_repeat.append(summaries)
    report.summary = {"repeats": per_repeat}

    target = _LOCK_TARGETS.get(s.name)
    if target is None or s.noise.kind is NoiseKind.NONE:
        return
    key, variation, min_factor = target
    tv = [max(r["uncorrected"]["total_variation_pm"]) for r in per_repeat]
    std = [max(r["in_situ"]["std_pm"]) for r in per_repeat]
    imp = [r["in_situ"]["improvement_factor"] for r in per_repeat]
    base = [r["tuning_curve_baseline"]["improvement_factor"] for r in per_repeat]
    ratio = [r["in_situ_over_baseline"] for r in per_repeat]
    report.checks[key] = _check(
        all(abs(t - variation) <= 0.2 * variation for t in tv)
        and max(std) <= 1.0 and min(imp) >= min_factor,
        uncorrected_total_variation_pm=tv,
        in_situ_max_std_pm=std,
        improvement_factor=imp,
        thresholds={"total_variation_pm": [0.8 * variation, 1.2 * variation],
                    "std_pm_max": 1.0, "improvement_min": min_factor},
    )
    report.checks["baseline_ordering"] = _check(
        min(base) >= 3.0 and min(ratio) >= 5.0,
        baseline_improvement=base,
        in_situ_over_baseline=ratio,
        thresholds={"baseline_improvement_min": 3.0, "in_situ_over_baseline_min": 5.0},
    )


def _run_calibration(s: Scenario, report: RunReport) -> None:
    device = s.device.build()
    n = device.n_rings
    c = s.calibration
    t0 = device.t_ref
    sweeps = {
        "temperature": CalibrationSweep(
            "temperature", t0, t0 + c.temperature_span_c, c.temperature_points, c.repeats
        ),
        "phase": CalibrationSweep.phase(
            stop=c.phase_stop_v, n_points=c.phase_points, repeats=c.repeats
        ),
    }
    table = Table(["variable", "x"] + [f"v{i + 1}" for i in range(n)] + ["ok"])
    report.tables["calibration"] = table
    curves = {}
    for var, sweep in sweeps.items():
        cal = calibrate_tuning_curves(device, sweep, s.seed, s.noise, s.lock)
        for x, v, ok in zip(cal.xs, cal.volts, cal.ok):
            table.add(var, x, *v, ok)
        curves[var] = {
            "coefficients": [list(r) for r in cal.curves.coeffs],
            "per_repeat": [[list(r) for r in pr.coeffs] for pr in cal.per_repeat],
            "failed_points": int(np.count_nonzero(~cal.ok)),
        }
    report.summary = {"curves": curves}
    slopes = [row[0] for row in curves["temperature"]["coefficients"]]
    leading = [row[0] for row in curves["phase"]["coefficients"]]
    report.checks["tuning_curve_roundtrip"] = _check(
        abs(slopes[0] - (-0.0609)) <= 0.1 * 0.0609 and all(a < 0 for a in leading),
        temperature_slopes=slopes,
        phase_leading_coefficients=leading,
        thresholds={"slope_v_per_c": -0.0609, "relative_tol": 0.1},
    )


def _lock_states(s: Scenario, states: list[EnvironmentState], device: DeviceModel, x0):
    """In-situ volts at each state, warm-started along the list."""
    cfg = replace(s.lock, success_detuning_tol=s.quantum.lock_tol_pm)
    rng = np.random.default_rng(np.random.SeedSequence([s.seed, 0xF1]))
    x = np.asarray(x0, dtype=float)
    out = []
    for st in states:
        plant = Plant(device, s.noise, st, rng, cfg.samples_per_eval)
        res = align(plant, x, cfg)
        x = res.volts
        out.append((res.volts, plant.detunings(res.volts), res.success))
    return out


def _counts(qc: QuantumConfig, det, width, phi, k, power, rng):
    src, bright = q.source_from_detunings(det, width, phi, qc.brightness_exponent)
    p20, p11, _ = q.output_probabilities(src)
    rate = q.pair_rate(power, k, qc.p_sat_uw) * bright
    expected = p11 * rate * qc.detector_eff**2 * qc.integration_time_s
    if qc.poisson:
        rec = q.sample_counts(p11, rate, qc.integration_time_s, qc.detector_eff, rng, p20, power)
        observed = rec.coincidences
    else:
        observed = expected
    return src, bright, p11, rate, expected, observed


def fit_roundtrip(n_seeds: int, seed: int = 0, peak_counts: float = 1.2e4,
                  visibility: float = 0.938, beta: float = q.PHASE_PER_V2,
                  phi0: float = 0.1, vp_max: float = 6.5, n_points: int = 27) -> dict[str, Any]:
    """Fit Poisson-sampled synthetic fringes of known visibility."""
    vp = np.linspace(0.0, vp_max, n_points)
    amp = peak_counts * visibility
    offset = peak_counts - amp
    errs = []
    for ss in np.random.SeedSequence([seed, 0xF17]).spawn(n_seeds):
        counts = np.random.default_rng(ss).poisson(q.fringe_model(vp, amp, beta, phi0, offset))
        errs.append(q.fit_fringe(vp, counts).visibility - visibility)
    errs_a = np.abs(np.array(errs))
    return {
        "n_seeds": n_seeds,
        "true_visibility": visibility,
        "max_abs_error": float(errs_a.max()) if n_seeds else float("nan"),
        "mean_error": float(np.mean(errs)) if n_seeds else float("nan"),
    }


def _run_fringe(s: Scenario, report: RunReport) -> None:
    device = s.device.build()
    qc = s.quantum
    width = float(device.gamma_width.mean())
    k = q.rate_coefficient(qc.max_pair_rate_hz, qc.max_power_uw, qc.p_sat_uw)
    peaks = [v for v in q.peak_phase_voltages(qc.beta, qc.phi0) if v <= qc.vp_max]
    grid = np.unique(np.concatenate([np.linspace(0.0, qc.vp_max, qc.n_points), peaks]))
    amb = np.random.default_rng(np.random.SeedSequence([s.seed, 0xA3])).normal(
        0.0, s.noise.ambient_sigma, size=grid.size
    ) if s.noise.ambient_sigma > 0 else np.zeros(grid.size)
    states = [
        EnvironmentState(temperature=device.t_ref, vp=float(g), time_index=i, ambient=float(a))
        for i, (g, a) in enumerate(zip(grid, amb))
    ]
    locked = _lock_states(s, states, device, s.lock.init_means)
    held = locked[0][0]
    count_rng = np.random.default_rng(np.random.SeedSequence([s.seed, 0xC0]))
    table = Table(["mode", "vp", "phi", "v1", "v2", "detuning1_pm", "detuning2_pm",
                   "overlap", "a1", "a2", "brightness", "p11", "expected_coincidences",
                   "coincidences"])
    report.tables["fringe"] = table
    summary: dict[str, Any] = {"pair_rate_coefficient": k, "peak_vp": peaks}
    for mode in (LockMode.IN_SITU, LockMode.UNCORRECTED):
        expected, observed = [], []
        for st, (v_lock, _, _) in zip(states, locked):
            volts = v_lock if mode is LockMode.IN_SITU else held
            plant = Plant(device, s.noise, st, count_rng)
            det = plant.detunings(volts)
            phi = qc.beta * st.vp**2 + qc.phi0
            src, bright, p11, _, exp_c, obs_c = _counts(
                qc, det, width, phi, k, qc.fringe_power_uw, count_rng
            )
            expected.append(exp_c)
            observed.append(obs_c)
            table.add(mode.value, st.vp, phi, *volts, *det, src.overlap, src.a1, src.a2,
                      bright, p11, exp_c, obs_c)
        idx = [int(np.argmin(np.abs(grid - p))) for p in peaks]
        res: dict[str, Any] = {}
        if len(idx) == 2:
            res["c_asy_expected"] = q.asymmetric_contrast(expected[idx[0]], expected[idx[1]])
            res["c_asy_counts"] = q.asymmetric_contrast(observed[idx[0]], observed[idx[1]])
        fit = q.fit_fringe(grid, observed)
        res["fit"] = fit.as_dict()
        res["visibility"] = fit.visibility
        res["visibility_err"] = fit.visibility_err
        summary[mode.value] = res
    if qc.roundtrip_seeds:
        summary["fit_roundtrip"] = fit_roundtrip(qc.roundtrip_seeds, s.seed)
    report.summary = summary

    if "c_asy_expected" in summary["in_situ"]:
        locked_c = summary["in_situ"]["c_asy_expected"]
        unc_c = summary["uncorrected"]["c_asy_expected"]
        report.checks["fringe_symmetry"] = _check(
            locked_c <= 1e-3 and unc_c >= 0.5,
            locked_c_asy=locked_c,
            uncorrected_c_asy=unc_c,
            thresholds={"locked_max": 1e-3, "uncorrected_min": 0.5},
        )
    if qc.roundtrip_seeds:
        rt = summary["fit_roundtrip"]
        report.checks["fringe_fit_roundtrip"] = _check(
            rt["max_abs_error"] <= 0.02, **rt, thresholds={"max_abs_error": 0.02}
        )


def conservation_check(n_draws: int, seed: int = 0, n_brute: int = 200) -> dict[str, Any]:
    """``P20 + P11 + P02`` over random sources with unit overlap."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0]))
    a1 = np.sqrt(rng.uniform(0.0, 1.0, n_draws))
    a2 = np.sqrt(np.maximum(0.0, 1.0 - a1 * a1))
    phi = rng.uniform(-math.pi, math.pi, n_draws)
    worst = 0.0
    for x1, x2, p in zip(a1, a2, phi):
        total = sum(q.output_probabilities(q.SourceAmplitudes(x1, x2, 1.0, p)))
        worst = max(worst, abs(total - 1.0))
    brute = 0.0
    for x1, x2, p in zip(a1[:n_brute], a2[:n_brute], phi[:n_brute]):
        model = q.output_probabilities(q.SourceAmplitudes(x1, x2, 1.0, p))
        direct = q.coupler_output_probabilities(x1, x2, p)
        brute = max(brute, max(abs(m - d) for m, d in zip(model, direct)))
    return {"n_draws": n_draws, "max_sum_error": worst,
            "n_brute_force": min(n_brute, n_draws), "max_brute_force_diff": brute}


def _loglog_slope(p, r) -> float:
    return float(np.polyfit(np.log(p), np.log(r), 1)[0])


def _run_power(s: Scenario, report: RunReport) -> None:
    device = s.device.build()
    qc = s.quantum
    width = float(device.gamma_width.mean())
    k = q.rate_coefficient(qc.max_pair_rate_hz, qc.max_power_uw, qc.p_sat_uw)
    powers = np.linspace(qc.power_min_uw, qc.max_power_uw, qc.n_power_points)
    vp = q.peak_phase_voltages(qc.beta, qc.phi0)[0]
    dldt = float(np.mean([r.dlambda_dT for r in device.rings]))
    states = [
        EnvironmentState(temperature=device.t_ref, vp=vp, time_index=i,
                         ambient=float(p) * qc.self_heating_pm_per_uw / dldt)
        for i, p in enumerate(powers)
    ]
    locked = _lock_states(s, states, device, s.lock.init_means)
    count_rng = np.random.default_rng(np.random.SeedSequence([s.seed, 0xD0]))
    table = Table(["power_uw", "v1", "v2", "detuning1_pm", "detuning2_pm",
                   "pair_rate_hz", "quadratic_rate_hz", "expected_coincidences",
                   "coincidences"])
    report.tables["power_sweep"] = table
    rates = []
    for p, (volts, det, _) in zip(powers, locked):
        phi = qc.beta * vp * vp + qc.phi0
        _, _, _, rate, exp_c, obs_c = _counts(qc, det, width, phi, k, p, count_rng)
        rates.append(rate)
        table.add(p, *volts, *det, rate, q.pair_rate(p, k), exp_c, obs_c)

    model = q.pair_rate(powers, k, qc.p_sat_uw)
    doubling = q.pair_rate(2 * powers, k) / q.pair_rate(powers, k)
    split = 200.0
    low, high = powers <= split, powers >= split
    summary: dict[str, Any] = {
        "pair_rate_coefficient": k,
        "rate_at_max_power_hz": float(model[-1]),
        "locked_rate_at_max_power_hz": float(rates[-1]),
        "doubling_max_error": float(np.max(np.abs(doubling - 4.0))),
        "slope_below_200uw": _loglog_slope(powers[low], model[low]) if low.sum() >= 2 else None,
        "slope_above_200uw": _loglog_slope(powers[high], model[high]) if high.sum() >= 2 else None,
    }
    if qc.conservation_draws:
        summary["probability_conservation"] = conservation_check(qc.conservation_draws, s.seed)
    report.summary = summary
    slope_hi = summary["slope_above_200uw"]
    report.checks["quadratic_power_law"] = _check(
        summary["doubling_max_error"] == 0.0
        and qc.p_sat_uw is not None and slope_hi is not None and slope_hi < 1.9,
        doubling_max_error=summary["doubling_max_error"],
        slope_above_200uw=slope_hi,
        thresholds={"doubling_error": 0.0, "slope_above_200uw_max": 1.9},
    )
    if qc.conservation_draws:
        pc = summary["probability_conservation"]
        report.checks["probability_conservation"] = _check(
            pc["max_sum_error"] <= 1e-12 and pc["max_brute_force_diff"] <= 1e-12,
            **pc, thresholds={"max_error": 1e-12},
        )


def _run_audit(s: Scenario, report: RunReport) -> None:
    a = s.audit
    if a.n_devices == 0:
        devices = [s.device.build()]
    else:
        rng = np.random.default_rng(np.random.SeedSequence([s.seed, 0xAD]))
        devices = [random_device(rng) for _ in range(a.n_devices)]
    n = devices[0].n_rings
    clusters = Table(["device", "cluster", "count"] + [f"v{i + 1}" for i in range(n)]
                     + [f"analytic_v{i + 1}" for i in range(n)])
    oracle = Table(["device"] + [f"v{i + 1}" for i in range(n)]
                   + [f"analytic_v{i + 1}" for i in range(n)]
                   + [f"detuning{i + 1}_pm" for i in range(n)] + ["success"])
    report.tables["critical_points"] = clusters
    report.tables["alignment_oracle"] = oracle
    quiet = NoiseSpec.quiet()
    n_clusters, offsets, volt_err, det_err = [], [], [], []
    for d_i, dev in enumerate(devices):
        rep = classify_critical_points(dev, a.n_starts, tuple(a.box_v), s.seed + d_i, a.cluster_tol_v)
        analytic = rep.analytic if rep.analytic is not None else np.full(n, np.nan)
        for c_i, (center, count) in enumerate(zip(rep.centers, rep.counts)):
            clusters.add(d_i, c_i, count, *center, *analytic)
        n_clusters.append(rep.n_clusters)
        offsets.append(rep.max_offset_from_analytic)
        # noiseless in-situ lock from a cold start, compared with the analytic solution
        res = static_align(dev, Environment(quiet, s.seed + d_i, dev.t_ref),
                           replace(s.lock, samples_per_eval=1), seed=s.seed + d_i,
                           x0=analytic + np.random.default_rng(s.seed + d_i).normal(0, 0.2, n))
        oracle.add(d_i, *res.volts, *analytic, *res.residual_detunings, res.success)
        volt_err.append(float(np.max(np.abs(res.volts - analytic))))
        det_err.append(float(np.max(np.abs(res.residual_detunings))))
    report.summary = {
        "n_devices": len(devices),
        "n_starts": a.n_starts,
        "clusters_per_device": n_clusters,
        "max_offset_from_analytic_v": offsets,
        "oracle_max_voltage_error_v": max(volt_err),
        "oracle_max_detuning_pm": max(det_err),
    }
    report.checks["unique_minimum"] = _check(
        all(c == 1 for c in n_clusters) and max(offsets) <= a.cluster_tol_v,
        clusters_per_device=n_clusters,
        thresholds={"clusters": 1},
    )
    report.checks["alignment_oracle"] = _check(
        max(volt_err) <= 1e-3 and max(det_err) < 0.1,
        max_voltage_error_v=max(volt_err),
        max_detuning_pm=max(det_err),
        thresholds={"voltage_v": 1e-3, "detuning_pm": 0.1},
    )


_RUNNERS: dict[ScenarioName, Callable[[Scenario, RunReport], None]] = {
    ScenarioName.STATIC_ALIGN: _run_static_align,
    ScenarioName.TEMP_WALK_LOCK: _run_lock,
    ScenarioName.CROSSTALK_LOCK: _run_lock,
    ScenarioName.TUNING_CURVE_CAL: _run_calibration,
    ScenarioName.FRINGE_SWEEP: _run_fringe,
    ScenarioName.POWER_SWEEP: _run_power,
    ScenarioName.CRITICAL_POINT_AUDIT: _run_audit,
}


def run_scenario(s: Scenario, out_dir: str | Path | None = None) -> RunReport:
    """Execute ``s`` and, when ``out_dir`` is given, write its files.

    A failure part-way through still writes whatever tables were filled,
    with ``status = "failed"``, and then raises :class:`RunFailure`.
    """
    report = RunReport(s)
    start = time.perf_counter()
    try:
        _RUNNERS[s.name](s, report)
    except (ValueError, RuntimeError, InfeasibleAlignment, ConfigurationError) as exc:
        report.status = "failed"
        report.error = f"{type(exc).__name__}: {exc}"
    report.wall_clock_s = time.perf_counter() - start
    if out_dir is not None:
        report.write(out_dir)
    if report.status != "ok":
        raise RunFailure(report.error)
    return report


__all__ = [
    "AuditConfig",
    "CalibrationConfig",
    "ConfigError",
    "DeviceConfig",
    "QuantumConfig",
    "RunFailure",
    "RunReport",
    "Scenario",
    "ScenarioName",
    "conservation_check",
    "config_hash",
    "fit_roundtrip",
    "load_config",
    "parse_config",
    "run_scenario",
    "schema",
]
