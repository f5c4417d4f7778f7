"""Coupled microring transmission model.

Wavelengths follow the usual photonics split: resonance and laser positions
are in nm, widths and shifts in pm. Heater tuning is quadratic in voltage
(shift proportional to dissipated power) and temperature enters linearly.

The Lorentzian used as the lock objective is the negative-valued form

    T(lambda_c) = -0.5 G / ((lambda_c - lambda_laser)^2 + (0.5 G)^2)

which is most negative on resonance. :func:`notch_power` is the matching
non-negative readout a photodiode would see on the through port.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ringlock.simplex import SimplexConfig, minimize

PM_PER_NM = 1000.0
BAND_NM = (1500.0, 1600.0)

# Device constants of the characterized chip. Tuning coefficients are
# calibrated (see README) rather than measured.
LINEWIDTH_PM = 60.0
FSR_NM = 8.8
LASER_NM = 1565.0
SELF_TUNE_PM_V2 = 175.0
CROSS_TUNE_PM_V2 = 1.0
THERMAL_PM_PER_C = 80.0
PHASE_CROSSTALK_PM_V2 = 45.0 / 6.5**2
T_REF_C = 30.0
# cold resonances place the aligned heater voltages at (3.60, 3.56) V
DEFAULT_LAMBDA0_NM = (1562.7193, 1562.7692)


class Topology(str, enum.Enum):
    SERIES = "series"
    PARALLEL = "parallel"


class InfeasibleAlignment(ValueError):
    """No non-negative heater voltages tune every ring onto the laser."""


@dataclass(frozen=True)
class RingParams:
    """One generation ring.

    Parameters
    ----------
    lambda0 : float
        Cold resonance at zero heater voltage and reference temperature [nm].
    gamma_width : float
        Lorentzian full width at half maximum [pm].
    gamma_tune : float
        Self-tuning coefficient [pm/V^2].
    dlambda_dT : float
        Thermo-optic shift [pm/degC].
    """

    lambda0: float
    gamma_width: float = LINEWIDTH_PM
    gamma_tune: float = SELF_TUNE_PM_V2
    dlambda_dT: float = THERMAL_PM_PER_C

    def __post_init__(self) -> None:
        for name in ("lambda0", "gamma_width", "gamma_tune", "dlambda_dT"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.gamma_width <= 0:
            raise ValueError(f"gamma_width must be > 0, got {self.gamma_width}")
        if self.gamma_tune <= 0:
            raise ValueError(f"gamma_tune must be > 0, got {self.gamma_tune}")
        if not BAND_NM[0] <= self.lambda0 <= BAND_NM[1]:
            raise ValueError(
                f"lambda0 = {self.lambda0} nm outside the simulated band {BAND_NM}"
            )


@dataclass(frozen=True)
class DeviceModel:
    """N generation rings sharing one pump laser and one phase shifter.

    ``cross_tune[i][j]`` is the shift of ring ``i`` per squared volt on the
    heater of ring ``j``; ``phase_crosstalk[i]`` the shift of ring ``i`` per
    squared volt on the differential phase shifter.
    """

    rings: tuple[RingParams, ...]
    cross_tune: NDArray[np.float64]
    phase_crosstalk: NDArray[np.float64]
    topology: Topology = Topology.PARALLEL
    lambda_laser: float = LASER_NM
    t_ref: float = T_REF_C
    dominance_margin: float = 1.0

    def __post_init__(self) -> None:
        rings = tuple(self.rings)
        n = len(rings)
        if n < 1:
            raise ValueError("device needs at least one ring")
        object.__setattr__(self, "rings", rings)
        cross = np.array(self.cross_tune, dtype=float).reshape(n, n) if n else None
        phase = np.array(self.phase_crosstalk, dtype=float).reshape(n)
        object.__setattr__(self, "cross_tune", cross)
        object.__setattr__(self, "phase_crosstalk", phase)
        object.__setattr__(self, "topology", Topology(self.topology))
        if np.any(np.diag(cross) != 0):
            raise ValueError("cross_tune diagonal must be zero")
        if not np.allclose(cross, cross.T, rtol=0, atol=1e-12):
            raise ValueError("cross_tune must be symmetric")
        if np.any(cross < 0):
            raise ValueError("cross_tune entries must be >= 0")
        if np.any(phase < 0) or not np.all(np.isfinite(phase)):
            raise ValueError("phase_crosstalk entries must be finite and >= 0")
        if not BAND_NM[0] <= self.lambda_laser <= BAND_NM[1]:
            raise ValueError(f"lambda_laser = {self.lambda_laser} nm outside band")
        violations = dominance_violations(self)
        if violations:
            raise ValueError("dominance condition violated: " + "; ".join(violations))

    @property
    def n_rings(self) -> int:
        return len(self.rings)

    @property
    def gamma_width(self) -> NDArray[np.float64]:
        return np.array([r.gamma_width for r in self.rings])

    def tuning_matrix(self) -> NDArray[np.float64]:
        """Shift of every ring per squared volt on every heater [pm/V^2]."""
        return np.diag([r.gamma_tune for r in self.rings]) + self.cross_tune

    def with_rings(self, rings: Sequence[RingParams]) -> "DeviceModel":
        return replace(self, rings=tuple(rings))


def default_device(
    n_rings: int = 2,
    topology: Topology | str = Topology.PARALLEL,
    cross: float = CROSS_TUNE_PM_V2,
) -> DeviceModel:
    """The characterized two-ring chip, or an N-ring extension of it."""
    lambda0 = list(DEFAULT_LAMBDA0_NM[:n_rings])
    while len(lambda0) < n_rings:
        lambda0.append(lambda0[-1] + 0.02)
    rings = tuple(RingParams(lambda0=l0) for l0 in lambda0)
    cross_tune = cross * (np.ones((n_rings, n_rings)) - np.eye(n_rings))
    return DeviceModel(
        rings=rings,
        cross_tune=cross_tune,
        phase_crosstalk=np.full(n_rings, PHASE_CROSSTALK_PM_V2),
        topology=Topology(topology),
    )


def random_device(
    rng: np.random.Generator,
    n_rings: int = 2,
    topology: Topology | str = Topology.PARALLEL,
    detuning_range_pm: tuple[float, float] = (300.0, 2500.0),
    gamma_range: tuple[float, float] = (120.0, 230.0),
    cross_max: float = 5.0,
) -> DeviceModel:
    """A random device that can be aligned and respects the dominance condition.

    Cold resonances sit blue of the laser by ``detuning_range_pm``; with the
    default ranges every ratio ``gamma / alpha`` is at least 24 while the
    largest detuning ratio is about 8.3.
    """
    detune = rng.uniform(*detuning_range_pm, size=n_rings)
    gammas = rng.uniform(*gamma_range, size=n_rings)
    upper = np.triu(rng.uniform(0.0, cross_max, size=(n_rings, n_rings)), 1)
    rings = tuple(
        RingParams(lambda0=LASER_NM - d / PM_PER_NM, gamma_tune=g)
        for d, g in zip(detune, gammas)
    )
    return DeviceModel(
        rings=rings,
        cross_tune=upper + upper.T,
        phase_crosstalk=np.full(n_rings, PHASE_CROSSTALK_PM_V2),
        topology=Topology(topology),
    )


def dominance_violations(device: DeviceModel) -> list[str]:
    """Pairs (i, j) where self tuning does not dominate cross tuning.

    Requires ``gamma_i / alpha_ij`` to exceed ``margin`` times both the ratio
    of the two rings' laser detunings and its reciprocal.
    """
    out = []
    det = [abs(device.lambda_laser - r.lambda0) for r in device.rings]
    for i, ri in enumerate(device.rings):
        for j in range(device.n_rings):
            a = device.cross_tune[i, j]
            if i == j or a == 0:
                continue
            if det[i] == 0 and det[j] == 0:
                worst = 1.0
            elif det[i] == 0 or det[j] == 0:
                worst = math.inf
            else:
                worst = max(det[i] / det[j], det[j] / det[i])
            if not ri.gamma_tune / a > device.dominance_margin * worst:
                out.append(
                    f"rings ({i}, {j}): gamma/alpha = {ri.gamma_tune / a:.4g} "
                    f"<= detuning ratio {worst:.4g}"
                )
    return out


def lorentzian_transmission(
    lambda_center: ArrayLike, lambda_laser: ArrayLike, gamma_width: ArrayLike
) -> NDArray[np.float64] | float:
    """Negative Lorentzian of a ring at ``lambda_center`` probed at ``lambda_laser``.

    Both wavelengths must share a unit; the result is in 1/unit (1/pm when
    widths are in pm). The on-resonance value is ``-2 / gamma_width``.
    """
    lc = np.asarray(lambda_center, dtype=float)
    ll = np.asarray(lambda_laser, dtype=float)
    g = np.asarray(gamma_width, dtype=float)
    if not (np.all(np.isfinite(lc)) and np.all(np.isfinite(ll)) and np.all(np.isfinite(g))):
        raise ValueError("lorentzian_transmission: non-finite input")
    if np.any(g <= 0):
        raise ValueError("gamma_width must be > 0")
    half = 0.5 * g
    out = -half / ((lc - ll) ** 2 + half**2)
    return float(out) if out.ndim == 0 else out


def notch_power(detuning_pm: ArrayLike, gamma_width: ArrayLike) -> NDArray[np.float64] | float:
    """Normalized through-port pump power of one ring, 0 on resonance, -> 1 off it."""
    d = np.asarray(detuning_pm, dtype=float)
    half_sq = (0.5 * np.asarray(gamma_width, dtype=float)) ** 2
    out = 1.0 - half_sq / (d**2 + half_sq)
    return float(out) if out.ndim == 0 else out


def _volts(device: DeviceModel, volts: ArrayLike) -> NDArray[np.float64]:
    v = np.asarray(volts, dtype=float).reshape(-1)
    if v.size != device.n_rings:
        raise ValueError(f"expected {device.n_rings} heater voltages, got {v.size}")
    return v


def central_wavelengths(
    device: DeviceModel,
    volts: ArrayLike,
    temperature: float | None = None,
    vp: float = 0.0,
) -> NDArray[np.float64]:
    """Resonance of every ring [nm] for the given heater voltages."""
    v = _volts(device, volts)
    t = device.t_ref if temperature is None else temperature
    l0 = np.array([r.lambda0 for r in device.rings])
    dldt = np.array([r.dlambda_dT for r in device.rings])
    shift_pm = (
        device.tuning_matrix() @ (v * v)
        + device.phase_crosstalk * vp * vp
        + dldt * (t - device.t_ref)
    )
    return l0 + shift_pm / PM_PER_NM


def detunings_pm(
    device: DeviceModel,
    volts: ArrayLike,
    temperature: float | None = None,
    vp: float = 0.0,
) -> NDArray[np.float64]:
    """Ring resonance minus laser wavelength [pm]."""
    lam = central_wavelengths(device, volts, temperature, vp)
    return (lam - device.lambda_laser) * PM_PER_NM


def combined_transmission(
    device: DeviceModel,
    volts: ArrayLike,
    temperature: float | None = None,
    vp: float = 0.0,
) -> float:
    """Series product or parallel sum of the ring Lorentzians [1/pm or 1/pm^N].

    The series product is taken over magnitudes and negated, so that for
    any number of rings both topologies are most negative when every ring
    sits on the laser line.
    """
    d = detunings_pm(device, volts, temperature, vp)
    t = lorentzian_transmission(d, 0.0, device.gamma_width)
    t = np.atleast_1d(t)
    if device.topology is Topology.SERIES:
        return -float(np.prod(np.abs(t)))
    return float(np.sum(t))


def monitor_power(
    device: DeviceModel,
    volts: ArrayLike,
    temperature: float | None = None,
    vp: float = 0.0,
) -> NDArray[np.float64]:
    """Noiseless photodiode readout per ring, each in [0, 1]."""
    d = detunings_pm(device, volts, temperature, vp)
    return np.atleast_1d(notch_power(d, device.gamma_width))


def analytic_alignment(
    device: DeviceModel,
    temperature: float | None = None,
    vp: float = 0.0,
) -> NDArray[np.float64]:
    """Heater voltages that put every ring exactly on the laser.

    Solves ``M @ V**2 = lambda_laser - lambda_ring(0)`` for the squared
    voltages, where ``M`` is the tuning matrix.

    Raises
    ------
    InfeasibleAlignment
        If ``M`` is singular or any squared voltage is negative.
    """
    target = detunings_pm(device, np.zeros(device.n_rings), temperature, vp)
    m = device.tuning_matrix()
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > 1e12:
        raise InfeasibleAlignment(f"tuning matrix is singular (cond = {cond:.3g})")
    v_sq = np.linalg.solve(m, -target)
    # float noise when a ring already sits on the laser
    v_sq[np.abs(v_sq) < 1e-12] = 0.0
    if np.any(v_sq < 0):
        bad = [i for i, x in enumerate(v_sq) if x < 0]
        raise InfeasibleAlignment(
            f"rings {bad} would need negative squared voltage "
            f"(laser blue of reachable tuning): V^2 = {v_sq.tolist()}"
        )
    return np.sqrt(v_sq)


@dataclass
class CriticalPointReport:
    """Distinct local minimizers found by a multi-start search."""

    centers: NDArray[np.float64]
    counts: list[int]
    analytic: NDArray[np.float64] | None
    n_starts: int
    max_offset_from_analytic: float = field(default=float("nan"))

    @property
    def n_clusters(self) -> int:
        return len(self.counts)


def classify_critical_points(
    device: DeviceModel,
    n_starts: int = 100,
    box: tuple[float, float] = (0.0, 6.0),
    seed: int = 0,
    cluster_tol: float = 1e-3,
) -> CriticalPointReport:
    """Multi-start local minimization of the transmission over a voltage box.

    Starts are uniform in ``box`` for every heater; each is run to tight
    tolerances and the end points are grouped with single-linkage at
    ``cluster_tol`` volts. Minimization is over non-negative voltages.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    if not box[1] > box[0]:
        raise ValueError(f"empty voltage box {box}")
    n = device.n_rings
    rng = np.random.default_rng(seed)
    starts = rng.uniform(box[0], box[1], size=(n_starts, n))
    # inline the transmission with precomputed constants: the audit runs
    # tens of thousands of evaluations per device
    m = device.tuning_matrix()
    l0 = (np.array([r.lambda0 for r in device.rings]) - device.lambda_laser) * PM_PER_NM
    half = 0.5 * device.gamma_width
    half_sq = half * half
    series = device.topology is Topology.SERIES

    def objective(v: NDArray[np.float64]) -> float:
        d = l0 + m @ (v * v)
        # normalized so each on-resonance ring contributes -1
        t = half_sq / (d * d + half_sq)
        return -float(np.prod(t)) if series else -float(np.sum(t))

    cfg = SimplexConfig(
        initial_scale=0.2,
        f_tol=0.0,
        x_tol=1e-7,
        max_evals=2000,
        lower=tuple([0.0] * n),
        upper=tuple([box[1] * 2] * n),
    )
    ends = []
    for x0 in starts:
        res = minimize(objective, x0, cfg)
        # restart once to escape a collapsed simplex
        res = minimize(objective, res.x_best, replace(cfg, initial_scale=0.01))
        ends.append(np.clip(res.x_best, 0.0, None))

    centers: list[NDArray[np.float64]] = []
    counts: list[int] = []
    for x in ends:
        for k, c in enumerate(centers):
            if np.max(np.abs(x - c)) <= cluster_tol:
                counts[k] += 1
                break
        else:
            centers.append(x)
            counts.append(1)

    try:
        analytic = analytic_alignment(device)
    except InfeasibleAlignment:
        analytic = None
    arr = np.array(centers)
    offset = float("nan")
    if analytic is not None:
        offset = float(np.max(np.abs(arr - analytic)))
    return CriticalPointReport(arr, counts, analytic, n_starts, offset)
