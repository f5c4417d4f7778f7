"""Downhill-simplex (Nelder-Mead) minimizer and a least-squares fitter built on it.

The minimizer is written for small voltage spaces (two to a handful of
heaters) where objective evaluations are expensive and possibly noisy, so it
counts every evaluation and can record a per-iteration trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

Objective = Callable[[NDArray[np.float64]], float]


@dataclass(frozen=True)
class SimplexConfig:
    """Coefficients, tolerances and budget for :func:`minimize`.

    Parameters
    ----------
    reflect, expand, contract, shrink : float
        Classical Nelder-Mead coefficients.
    initial_scale : float
        Edge length of the initial simplex along each axis.
    f_tol : float
        Relative spread of vertex values below which the run stops.
    x_tol : float
        Simplex diameter below which the run stops.
    max_evals : int
        Objective evaluation budget.
    max_iter : int or None
        Optional iteration budget.
    lower, upper : array-like or None
        Optional box bounds. Vertices outside the box are evaluated at the
        clamped point plus ``penalty`` times the distance to the box.
    """

    reflect: float = 1.0
    expand: float = 2.0
    contract: float = 0.5
    shrink: float = 0.5
    initial_scale: float = 0.2
    f_tol: float = 1e-6
    x_tol: float = 1e-4
    max_evals: int = 500
    max_iter: int | None = None
    lower: tuple[float, ...] | None = None
    upper: tuple[float, ...] | None = None
    penalty: float = 1e3
    record_trace: bool = False

    def __post_init__(self) -> None:
        if not self.reflect > 0:
            raise ValueError(f"reflect must be > 0, got {self.reflect}")
        if not self.expand > 1:
            raise ValueError(f"expand must be > 1, got {self.expand}")
        if not 0 < self.contract < 1:
            raise ValueError(f"contract must be in (0, 1), got {self.contract}")
        if not 0 < self.shrink < 1:
            raise ValueError(f"shrink must be in (0, 1), got {self.shrink}")
        if not self.initial_scale > 0:
            raise ValueError(f"initial_scale must be > 0, got {self.initial_scale}")
        if self.f_tol < 0 or self.x_tol < 0:
            raise ValueError("tolerances must be non-negative")
        if self.max_evals < 2:
            raise ValueError(f"max_evals must be >= 2, got {self.max_evals}")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.lower is not None:
            object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        if self.upper is not None:
            object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))


@dataclass
class OptResult:
    """Outcome of a simplex run.

    ``f_best`` is the value recorded when ``x_best`` was evaluated; for noisy
    objectives it is that sample, not the noiseless value.
    """

    x_best: NDArray[np.float64]
    f_best: float
    n_evals: int
    n_iter: int
    converged: bool
    message: str = ""
    simplex: NDArray[np.float64] | None = None
    trace: list[tuple[NDArray[np.float64], float]] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.converged


class _Counted:
    """Wraps the objective with a bound penalty and an evaluation counter."""

    def __init__(self, fun: Objective, lower, upper, penalty: float) -> None:
        self.fun = fun
        self.lower = None if lower is None else np.asarray(lower, dtype=float)
        self.upper = None if upper is None else np.asarray(upper, dtype=float)
        self.penalty = penalty
        self.count = 0

    def __call__(self, x: NDArray[np.float64]) -> float:
        self.count += 1
        excess = 0.0
        xc = x
        if self.lower is not None or self.upper is not None:
            lo = -np.inf if self.lower is None else self.lower
            hi = np.inf if self.upper is None else self.upper
            xc = np.clip(x, lo, hi)
            excess = float(np.sum(np.abs(x - xc)))
        value = float(self.fun(xc))
        if excess > 0.0:
            value += self.penalty * excess
        return value


def _spread_small(fsim: NDArray[np.float64], f_tol: float) -> bool:
    spread = fsim[-1] - fsim[0]
    scale = max(abs(fsim[0]), abs(fsim[-1]))
    return spread <= f_tol * scale


def minimize(
    objective: Objective,
    x0: ArrayLike,
    config: SimplexConfig | None = None,
) -> OptResult:
    """Minimize ``objective`` starting from ``x0`` with the downhill simplex.

    The run stops when the relative spread of vertex values drops below
    ``config.f_tol``, when the simplex diameter drops below ``config.x_tol``,
    or when the evaluation/iteration budget is exhausted. Only the first two
    count as converged.
    """
    cfg = config or SimplexConfig()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if x0.ndim != 1 or x0.size < 1:
        raise ValueError("x0 must be a non-empty vector")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    n = x0.size
    if cfg.max_evals < n + 1:
        raise ValueError(f"max_evals must be >= dimension + 1 = {n + 1}")
    for name, bound in (("lower", cfg.lower), ("upper", cfg.upper)):
        if bound is not None and len(bound) != n:
            raise ValueError(f"{name} bound has length {len(bound)}, expected {n}")

    f = _Counted(objective, cfg.lower, cfg.upper, cfg.penalty)
    trace: list[tuple[NDArray[np.float64], float]] = []

    f0 = f(x0)
    if not np.isfinite(f0):
        return OptResult(x0, f0, f.count, 0, False, "objective is not finite at x0")

    sim = np.empty((n + 1, n))
    fsim = np.empty(n + 1)
    sim[0], fsim[0] = x0, f0
    for k in range(n):
        y = x0.copy()
        y[k] += cfg.initial_scale
        sim[k + 1] = y
        fsim[k + 1] = f(y)

    order = np.argsort(fsim, kind="stable")
    sim, fsim = sim[order], fsim[order]
    if cfg.record_trace:
        trace.append((sim[0].copy(), float(fsim[0])))

    rho, chi, psi, sigma = cfg.reflect, cfg.expand, cfg.contract, cfg.shrink
    n_iter = 0
    converged = False
    message = "evaluation budget exhausted"

    while True:
        diameter = float(np.max(np.abs(sim[1:] - sim[0])))
        if diameter <= cfg.x_tol:
            converged, message = True, "simplex diameter below x_tol"
            break
        if _spread_small(fsim, cfg.f_tol):
            converged, message = True, "objective spread below f_tol"
            break
        if cfg.max_iter is not None and n_iter >= cfg.max_iter:
            message = "iteration budget exhausted"
            break
        # reflect + expand/contract need up to two evaluations, shrink n
        if f.count + 2 > cfg.max_evals:
            break

        centroid = sim[:-1].mean(axis=0)
        xr = centroid + rho * (centroid - sim[-1])
        fr = f(xr)
        shrink_now = False
        if fr < fsim[0]:
            xe = centroid + rho * chi * (centroid - sim[-1])
            fe = f(xe)
            if fe < fr:
                sim[-1], fsim[-1] = xe, fe
            else:
                sim[-1], fsim[-1] = xr, fr
        elif fr < fsim[-2]:
            sim[-1], fsim[-1] = xr, fr
        elif fr < fsim[-1]:
            xc = centroid + psi * rho * (centroid - sim[-1])
            fc = f(xc)
            if fc <= fr:
                sim[-1], fsim[-1] = xc, fc
            else:
                shrink_now = True
        else:
            xcc = centroid - psi * (centroid - sim[-1])
            fcc = f(xcc)
            if fcc < fsim[-1]:
                sim[-1], fsim[-1] = xcc, fcc
            else:
                shrink_now = True

        if shrink_now:
            if f.count + n > cfg.max_evals:
                n_iter += 1
                break
            for j in range(1, n + 1):
                sim[j] = sim[0] + sigma * (sim[j] - sim[0])
                fsim[j] = f(sim[j])

        order = np.argsort(fsim, kind="stable")
        sim, fsim = sim[order], fsim[order]
        n_iter += 1
        if cfg.record_trace:
            trace.append((sim[0].copy(), float(fsim[0])))

    return OptResult(
        x_best=sim[0].copy(),
        f_best=float(fsim[0]),
        n_evals=f.count,
        n_iter=n_iter,
        converged=converged,
        message=message,
        simplex=sim.copy(),
        trace=trace,
    )


def fit_curve(
    model: Callable[..., NDArray[np.float64]],
    params0: Sequence[float],
    xs: ArrayLike,
    ys: ArrayLike,
    config: SimplexConfig | None = None,
    restarts: int = 3,
) -> OptResult:
    """Least-squares fit of ``model(xs, *params)`` to ``ys``.

    The sum of squared residuals is minimized with :func:`minimize`. The
    simplex is restarted from the previous optimum ``restarts`` times, which
    is the usual remedy for premature collapse of Nelder-Mead on
    ill-conditioned residual surfaces.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    p0 = np.asarray(params0, dtype=float)
    if xs.shape != ys.shape:
        raise ValueError(f"xs and ys differ in shape: {xs.shape} vs {ys.shape}")
    if xs.size < p0.size:
        raise ValueError(
            f"need at least {p0.size} points for {p0.size} parameters, got {xs.size}"
        )

    def sse(p: NDArray[np.float64]) -> float:
        r = model(xs, *p) - ys
        return float(np.dot(r, r))

    if config is None:
        scale = float(max(np.max(np.abs(p0)), 1e-3)) * 0.1
        config = SimplexConfig(
            initial_scale=scale, f_tol=1e-15, x_tol=1e-12, max_evals=20000
        )
    res = minimize(sse, p0, config)
    total_evals, total_iter = res.n_evals, res.n_iter
    for _ in range(restarts):
        if res.f_best == 0.0:
            break
        step = float(max(np.max(np.abs(res.x_best)), 1e-3)) * 1e-2
        again = minimize(sse, res.x_best, replace(config, initial_scale=step))
        total_evals += again.n_evals
        total_iter += again.n_iter
        if again.f_best <= res.f_best:
            res = again
        else:
            break
    res.n_evals, res.n_iter = total_evals, total_iter
    return res

