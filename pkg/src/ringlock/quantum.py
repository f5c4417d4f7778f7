"""Two-ring photon-pair source, two-photon interference and fringe metrics.

Each generation ring emits a degenerate pair into its own arm; the arms
meet on a 50/50 coupler after a differential phase ``phi``. With ring
amplitudes ``a1``, ``a2`` and wavepacket overlap ``O`` the output
probabilities are

    P11 = (a1^2 + a2^2 - 2 a1 a2 O cos 2phi) / 2
    P20 = P02 = (a1^2 + a2^2 + 2 a1 a2 O cos 2phi) / 4

which for identical, equally bright rings reduce to ``sin^2 phi`` and
``cos^2 phi / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ringlock.simplex import fit_curve

DETECTOR_EFFICIENCY = 0.75
MAX_PAIR_RATE_HZ = 13.5e3
SATURATION_POWER_UW = 200.0
PHASE_PER_V2 = 0.15
BRIGHTNESS_EXPONENT = 4


@dataclass(frozen=True)
class SourceAmplitudes:
    a1: float
    a2: float
    overlap: float = 1.0
    phi: float = 0.0

    def __post_init__(self) -> None:
        if self.a1 < 0 or self.a2 < 0:
            raise ValueError("amplitudes must be non-negative")
        if abs(self.a1**2 + self.a2**2 - 1.0) > 1e-12:
            raise ValueError(f"a1^2 + a2^2 = {self.a1**2 + self.a2**2}, expected 1")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError(f"overlap must be in [0, 1], got {self.overlap}")

    @classmethod
    def balanced(cls, overlap: float = 1.0, phi: float = 0.0) -> "SourceAmplitudes":
        return cls(math.sqrt(0.5), math.sqrt(0.5), overlap, phi)

    @classmethod
    def from_brightness(
        cls, b1: float, b2: float, overlap: float = 1.0, phi: float = 0.0
    ) -> "SourceAmplitudes":
        """Amplitudes proportional to the square root of each ring's brightness."""
        total = b1 + b2
        if total <= 0:
            raise ValueError("at least one ring must be bright")
        a1 = math.sqrt(b1 / total)
        a2 = math.sqrt(max(0.0, 1.0 - a1 * a1))
        return cls(a1, a2, overlap, phi)

    def with_phase(self, phi: float) -> "SourceAmplitudes":
        return SourceAmplitudes(self.a1, self.a2, self.overlap, phi)


def coincidence_probability(src: SourceAmplitudes) -> float:
    """Probability of one photon in each output arm."""
    interference = 2.0 * src.a1 * src.a2 * src.overlap * math.cos(2.0 * src.phi)
    return 0.5 * (src.a1**2 + src.a2**2 - interference)


def output_probabilities(src: SourceAmplitudes) -> tuple[float, float, float]:
    """``(P20, P11, P02)`` after the final coupler."""
    p11 = coincidence_probability(src)
    interference = 2.0 * src.a1 * src.a2 * src.overlap * math.cos(2.0 * src.phi)
    bunched = 0.25 * (src.a1**2 + src.a2**2 + interference)
    return bunched, p11, bunched


def _permanent(m: NDArray[np.complex128]) -> complex:
    n = m.shape[0]
    if n == 0:
        return 1.0
    return sum(m[0, j] * _permanent(np.delete(m[1:], j, axis=1)) for j in range(n))


def _occupation_rows(occ: tuple[int, ...]) -> list[int]:
    return [mode for mode, k in enumerate(occ) for _ in range(k)]


def fock_evolve(
    amplitudes: dict[tuple[int, ...], complex], unitary: ArrayLike
) -> dict[tuple[int, ...], complex]:
    """Evolve a fixed-photon-number Fock superposition through a linear network.

    ``<m|U|n> = perm(U[m, n]) / sqrt(prod m! prod n!)`` with rows and
    columns of ``U`` repeated by occupation. Brute force over all output
    occupations, so only sensible for a few photons and modes.
    """
    u = np.asarray(unitary, dtype=complex)
    n_modes = u.shape[0]
    n_photons = {sum(k) for k in amplitudes}
    if len(n_photons) != 1:
        raise ValueError("input components must share one photon number")
    total = n_photons.pop()
    outputs = [
        occ for occ in np.ndindex(*(total + 1,) * n_modes) if sum(occ) == total
    ]
    result: dict[tuple[int, ...], complex] = {}
    for out in outputs:
        amp = 0.0 + 0.0j
        rows = _occupation_rows(out)
        norm_out = np.prod([math.factorial(k) for k in out])
        for inp, c in amplitudes.items():
            cols = _occupation_rows(inp)
            norm_in = np.prod([math.factorial(k) for k in inp])
            sub = u[np.ix_(rows, cols)]
            amp += c * _permanent(sub) / math.sqrt(norm_out * norm_in)
        result[tuple(int(k) for k in out)] = amp
    return result


BEAMSPLITTER_50_50 = np.array([[1.0, 1.0], [1.0, -1.0]]) / math.sqrt(2.0)


def coupler_output_probabilities(a1: float, a2: float, phi: float) -> tuple[float, float, float]:
    """``(P20, P11, P02)`` for ``a1|20> + a2 e^{2i phi}|02>`` by direct evolution."""
    state = {(2, 0): complex(a1), (0, 2): a2 * np.exp(2j * phi)}
    out = fock_evolve(state, BEAMSPLITTER_50_50)
    return abs(out[(2, 0)]) ** 2, abs(out[(1, 1)]) ** 2, abs(out[(0, 2)]) ** 2


def spectral_overlap(detuning: ArrayLike, gamma_width: float) -> NDArray[np.float64] | float:
    """Overlap of two Lorentzian wavepackets whose centres differ by ``detuning``."""
    if gamma_width <= 0:
        raise ValueError("gamma_width must be > 0")
    d = np.asarray(detuning, dtype=float)
    out = 1.0 / (1.0 + (d / gamma_width) ** 2)
    return float(out) if out.ndim == 0 else out


def ring_brightness(
    detuning: ArrayLike, gamma_width: float, exponent: int = BRIGHTNESS_EXPONENT
) -> NDArray[np.float64] | float:
    """Relative pair brightness of a ring detuned from the laser grid.

    Every pump and signal resonance sees the same detuning, and each
    contributes one Lorentzian intensity enhancement.
    """
    if gamma_width <= 0:
        raise ValueError("gamma_width must be > 0")
    d = np.asarray(detuning, dtype=float)
    out = (1.0 / (1.0 + (2.0 * d / gamma_width) ** 2)) ** exponent
    return float(out) if out.ndim == 0 else out


def source_from_detunings(
    detunings_pm: ArrayLike,
    gamma_width: float,
    phi: float = 0.0,
    exponent: int = BRIGHTNESS_EXPONENT,
) -> tuple[SourceAmplitudes, float]:
    """Amplitudes of a two-ring source and its mean brightness."""
    d1, d2 = (float(x) for x in np.asarray(detunings_pm, dtype=float).reshape(2))
    b1 = ring_brightness(d1, gamma_width, exponent)
    b2 = ring_brightness(d2, gamma_width, exponent)
    overlap = spectral_overlap(d1 - d2, gamma_width)
    return SourceAmplitudes.from_brightness(b1, b2, overlap, phi), 0.5 * (b1 + b2)


def pair_rate(
    power_per_ring: ArrayLike, k: float, p_sat: float | None = None
) -> NDArray[np.float64] | float:
    """Pair generation rate [Hz] for pump power [uW] per ring.

    Quadratic in power. With ``p_sat`` set, two-photon absorption is
    modelled as ``k P^2 / (1 + P / p_sat)^2``.
    """
    p = np.asarray(power_per_ring, dtype=float)
    if np.any(p < 0):
        raise ValueError("pump power must be >= 0")
    rate = k * p * p
    if p_sat is not None:
        rate = rate / (1.0 + p / p_sat) ** 2
    return float(rate) if rate.ndim == 0 else rate


def rate_coefficient(target_rate: float, power: float, p_sat: float | None = None) -> float:
    """``k`` such that ``pair_rate(power, k, p_sat) == target_rate``."""
    return target_rate / pair_rate(power, 1.0, p_sat)


@dataclass(frozen=True)
class CountRecord:
    singles1: int
    singles2: int
    coincidences: int
    integration_time: float
    pump_power: float = float("nan")


def sample_counts(
    p11: float,
    rate: float,
    integration_time: float,
    detector_eff: float,
    rng: np.random.Generator,
    p20: float | None = None,
    pump_power: float = float("nan"),
) -> CountRecord:
    """Poisson counts for one integration window.

    A pair split across the arms gives a coincidence with probability
    ``eta^2``; any pair with a photon reaching a detector adds to that arm's
    singles. ``p20`` defaults to an even split of the bunched probability.
    """
    if not 0.0 <= p11 <= 1.0:
        raise ValueError(f"p11 must be in [0, 1], got {p11}")
    if not 0.0 <= detector_eff <= 1.0:
        raise ValueError(f"detector_eff must be in [0, 1], got {detector_eff}")
    if rate < 0 or integration_time < 0:
        raise ValueError("rate and integration_time must be >= 0")
    eta = detector_eff
    p20 = 0.5 * (1.0 - p11) if p20 is None else p20
    p02 = max(0.0, 1.0 - p11 - p20)
    pairs = rate * integration_time
    coinc = int(rng.poisson(p11 * pairs * eta * eta))
    # singles without a partner click: split pairs losing the other photon,
    # plus bunched pairs with at least one photon detected
    both_lost = (1.0 - eta) ** 2
    extra1 = pairs * (p11 * eta * (1.0 - eta) + p20 * (1.0 - both_lost))
    extra2 = pairs * (p11 * eta * (1.0 - eta) + p02 * (1.0 - both_lost))
    s1 = coinc + int(rng.poisson(extra1))
    s2 = coinc + int(rng.poisson(extra2))
    return CountRecord(s1, s2, coinc, integration_time, pump_power)


def asymmetric_contrast(c1: float, c2: float) -> float:
    """``|C1 - C2| / max(C1, C2)``; NaN when both are zero."""
    top = max(c1, c2)
    if top <= 0:
        return float("nan")
    return abs(c1 - c2) / top


def quantum_visibility(c_max: float, c_min: float) -> float:
    """``(C_max - C_min) / C_max``; NaN when ``c_max`` is not positive."""
    if c_max <= 0:
        return float("nan")
    if c_min > c_max:
        raise ValueError("c_min exceeds c_max")
    return (c_max - c_min) / c_max


def fringe_model(vp: ArrayLike, amplitude: float, beta: float, phi0: float, offset: float):
    """Coincidences versus phase voltage: ``A sin^2(beta vp^2 + phi0) + C0``."""
    vp = np.asarray(vp, dtype=float)
    return amplitude * np.sin(beta * vp * vp + phi0) ** 2 + offset


def peak_phase_voltages(beta: float, phi0: float = 0.0) -> tuple[float, float]:
    """Phase voltages where ``phi`` equals pi/2 and 3pi/2."""
    return (
        math.sqrt((0.5 * math.pi - phi0) / beta),
        math.sqrt((1.5 * math.pi - phi0) / beta),
    )


@dataclass
class FringeFit:
    amplitude: float
    beta: float
    phi0: float
    offset: float
    visibility: float
    visibility_err: float
    rms_residual: float
    converged: bool

    @property
    def c_max(self) -> float:
        return self.offset + max(self.amplitude, 0.0)

    @property
    def c_min(self) -> float:
        return self.offset + min(self.amplitude, 0.0)

    def as_dict(self) -> dict:
        return {k: float(v) if not isinstance(v, bool) else v for k, v in self.__dict__.items()}


def _seed_grid(vp, y, beta_range, n_beta, n_phi):
    """Best (beta, phi0) on a coarse grid with (A, C0) solved linearly."""
    best = (np.inf, None)
    for beta in np.linspace(beta_range[0], beta_range[1], n_beta):
        for phi0 in np.linspace(0.0, math.pi, n_phi, endpoint=False):
            s2 = np.sin(beta * vp * vp + phi0) ** 2
            design = np.column_stack([s2, np.ones_like(s2)])
            coef, *_ = np.linalg.lstsq(design, y, rcond=None)
            r = design @ coef - y
            sse = float(r @ r)
            if sse < best[0]:
                best = (sse, (coef[0], beta, phi0, coef[1]))
    return best[1]


def fit_fringe(
    vp_values: ArrayLike,
    coincidences: ArrayLike,
    beta_range: tuple[float, float] = (0.05, 0.4),
) -> FringeFit:
    """Least-squares fit of :func:`fringe_model` and the implied visibility.

    Counts are scaled to unit peak before fitting. The visibility error is
    propagated from the parameter covariance ``s^2 (J^T J)^-1``.
    """
    vp = np.asarray(vp_values, dtype=float)
    y_raw = np.asarray(coincidences, dtype=float)
    if vp.shape != y_raw.shape:
        raise ValueError("vp_values and coincidences differ in shape")
    if vp.size < 4:
        raise ValueError("fringe fit needs at least 4 points")
    scale = float(np.max(np.abs(y_raw))) or 1.0
    y = y_raw / scale

    p0 = _seed_grid(vp, y, beta_range, 36, 24)
    res = fit_curve(fringe_model, p0, vp, y)
    a, beta, phi0, c0 = (float(v) for v in res.x_best)
    if a < 0:
        # A sin^2(x) + C = -A cos^2(x) + (C + A) = -A sin^2(x + pi/2) + (C + A)
        a, phi0, c0 = -a, phi0 + 0.5 * math.pi, c0 + a
    phi0 = math.fmod(phi0, math.pi)
    if phi0 < 0:
        phi0 += math.pi

    params = np.array([a, beta, phi0, c0])
    resid = fringe_model(vp, *params) - y
    dof = max(vp.size - params.size, 1)
    s2 = float(resid @ resid) / dof
    jac = np.empty((vp.size, params.size))
    for j in range(params.size):
        h = 1e-6 * max(abs(params[j]), 1e-3)
        up, dn = params.copy(), params.copy()
        up[j] += h
        dn[j] -= h
        jac[:, j] = (fringe_model(vp, *up) - fringe_model(vp, *dn)) / (2 * h)
    cov = s2 * np.linalg.pinv(jac.T @ jac)

    c_max = a + c0
    vis = quantum_visibility(c_max, c0) if c_max > 0 else float("nan")
    grad = np.array([c0 / c_max**2, 0.0, 0.0, -a / c_max**2]) if c_max > 0 else np.zeros(4)
    vis_err = float(math.sqrt(max(grad @ cov @ grad, 0.0)))
    return FringeFit(
        amplitude=a * scale,
        beta=beta,
        phi0=phi0,
        offset=c0 * scale,
        visibility=vis,
        visibility_err=vis_err,
        rms_residual=float(math.sqrt(s2)) * scale,
        converged=res.converged,
    )


__all__ = [
    "BEAMSPLITTER_50_50",
    "coupler_output_probabilities",
    "fock_evolve",
    "CountRecord",
    "FringeFit",
    "SourceAmplitudes",
    "asymmetric_contrast",
    "coincidence_probability",
    "fit_fringe",
    "fringe_model",
    "output_probabilities",
    "pair_rate",
    "peak_phase_voltages",
    "quantum_visibility",
    "rate_coefficient",
    "ring_brightness",
    "sample_counts",
    "source_from_detunings",
    "spectral_overlap",
]
