"""Positive solutions of ``rho' = Laplace rho + <grad rho, X> + U rho`` on flat tori.

Diffusion is applied exactly through the Fourier multiplier ``exp(-|xi|^2 dt)``;
the drift and reaction terms are advanced explicitly with an integrating-factor
RK2 (Heun) step, which is exact whenever ``X = 0`` and ``U = 0``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .fields import DriftSpec
from .geometry import FlatTorus
from .numerics import Grid

log = logging.getLogger(__name__)

DEFAULT_MAX_SNAPSHOTS = 200
SEED_TRUNCATION = 1e-16


class SolverAbort(RuntimeError):
    """Integration stopped; ``time`` is where it happened."""

    def __init__(self, message: str, time: float):
        super().__init__(f"{message} at t={time:.6g}")
        self.time = time


class PositivityLost(SolverAbort):
    def __init__(self, time: float):
        super().__init__("positivity lost", time)


@dataclass
class Trajectory:
    """Snapshots of a positive solution; ``origin`` is where the theorems' clock starts."""

    grid: Grid
    times: np.ndarray
    snapshots: np.ndarray
    mass: np.ndarray
    min_rho: np.ndarray
    dt: float
    origin: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if np.any(self.min_rho <= 0):
            raise ValueError("trajectory contains non-positive values")

    def __len__(self):
        return len(self.times)

    @property
    def theorem_times(self) -> np.ndarray:
        return self.times - self.origin


def stability_bound(grid: Grid, spec: DriftSpec) -> float:
    h = min(grid.spacing)
    bounds = [h * h]
    xmax = float(np.sqrt(np.sum(spec.X**2, axis=0)).max())
    umax = float(np.abs(spec.U).max())
    if xmax > 0:
        bounds.append(h / (4 * xmax))
    if umax > 0:
        bounds.append(1.0 / (4 * umax))
    return min(bounds)


def _snapshot_stride(nsteps: int, max_snapshots: int | None, stride: int | None) -> int:
    if stride is not None:
        return max(1, int(stride))
    if max_snapshots is None:
        return 1
    return max(1, math.ceil(nsteps / max(1, max_snapshots - 1)))


class _Stepper:
    def __init__(self, grid: Grid, spec: DriftSpec, dt: float):
        self.grid = grid
        self.X = spec.X
        self.U = spec.U
        self.dt = dt
        k2 = sum(
            np.meshgrid(*[grid.wavenumbers(a) ** 2 for a in range(grid.dim)], indexing="ij")
        )
        self.full = np.exp(-k2 * dt)
        self.mults = [
            numerics._multiplier(grid, a, 1).reshape(
                [grid.points[a] if b == a else 1 for b in range(grid.dim)]
            )
            for a in range(grid.dim)
        ]
        self.has_drift = bool(np.any(self.X))
        self.has_reaction = bool(np.any(self.U))

    def _rhs(self, rho_hat: np.ndarray, rho: np.ndarray) -> np.ndarray:
        out = self.U * rho if self.has_reaction else np.zeros_like(rho)
        if self.has_drift:
            for a, mult in enumerate(self.mults):
                out = out + self.X[a] * np.fft.ifftn(rho_hat * mult).real
        return out

    def step(self, rho: np.ndarray) -> np.ndarray:
        rho_hat = np.fft.fftn(rho)
        if not (self.has_drift or self.has_reaction):
            return np.fft.ifftn(rho_hat * self.full).real
        dt = self.dt
        k1 = self._rhs(rho_hat, rho)
        pred_hat = np.fft.fftn(rho + dt * k1) * self.full
        pred = np.fft.ifftn(pred_hat).real
        k2 = self._rhs(pred_hat, pred)
        base = np.fft.ifftn(np.fft.fftn(rho + 0.5 * dt * k1) * self.full).real
        return base + 0.5 * dt * k2


def solve(model: FlatTorus, spec: DriftSpec, rho0: np.ndarray, t_start: float, t_end: float,
          dt: float, max_snapshots: int | None = DEFAULT_MAX_SNAPSHOTS, stride: int | None = None,
          origin: float | None = None) -> Trajectory:
    """Evolve ``rho0`` from ``t_start`` to ``t_end``.

    ``dt`` is reduced (with a warning) to the explicit stability bound
    ``min(h / (4 sup|X|), 1 / (4 sup|U|), h^2)``. Snapshots are stored every
    ``stride`` steps; by default the stride keeps at most ``max_snapshots``.
    """
    if not isinstance(model, FlatTorus):
        raise TypeError("the solver supports flat tori only")
    grid = model.grid
    rho = np.array(rho0, dtype=float)
    if rho.shape != grid.shape:
        raise ValueError(f"rho0 must have shape {grid.shape}")
    if not np.all(np.isfinite(rho)):
        raise ValueError("rho0 is not finite")
    if rho.min() <= 0:
        raise ValueError("rho0 must be strictly positive")
    if not (t_start >= 0 and t_end > t_start):
        raise ValueError("need 0 <= t_start < t_end")
    if not dt > 0:
        raise ValueError("dt must be positive")
    bound = stability_bound(grid, spec)
    if dt > bound:
        warnings.warn(f"dt={dt:.3g} exceeds the stability bound; reduced to {bound:.3g}",
                      RuntimeWarning, stacklevel=2)
        dt = bound
    nsteps = max(1, math.ceil((t_end - t_start) / dt - 1e-9))
    dt_eff = (t_end - t_start) / nsteps
    every = _snapshot_stride(nsteps, max_snapshots, stride)
    stepper = _Stepper(grid, spec, dt_eff)

    times, snaps = [t_start], [rho.copy()]
    for i in range(1, nsteps + 1):
        rho = stepper.step(rho)
        t = t_start + i * dt_eff
        if not np.all(np.isfinite(rho)):
            raise SolverAbort("non-finite values", t)
        if rho.min() <= 0:
            raise PositivityLost(t)
        if i % every == 0 or i == nsteps:
            times.append(t)
            snaps.append(rho.copy())
    snaps = np.array(snaps)
    log.debug("solved %d steps (dt=%.3g), %d snapshots", nsteps, dt_eff, len(times))
    return Trajectory(
        grid=grid,
        times=np.array(times),
        snapshots=snaps,
        mass=np.array([grid.integrate(s) for s in snaps]),
        min_rho=snaps.reshape(len(snaps), -1).min(axis=1),
        dt=dt_eff,
        origin=t_start if origin is None else origin,
        meta={"stride": every, "steps": nsteps},
    )


def heat_kernel_seed(grid: Grid, center, t0: float) -> np.ndarray:
    """Periodised Gaussian heat kernel ``sum_m (4 pi t0)^{-n/2} exp(-|x - c + L m|^2 / (4 t0))``."""
    if not t0 > 0:
        raise ValueError("t0 must be positive")
    center = np.broadcast_to(np.asarray(center, dtype=float), (grid.dim,))
    width = math.sqrt(2 * t0)
    if width >= min(grid.periods) / 8:
        raise ValueError(f"Gaussian width {width:.3g} too large for the torus (>= period/8)")
    factors = []
    for a in range(grid.dim):
        L = grid.periods[a]
        x = grid.axis_nodes(a)
        d = np.mod(x - center[a] + L / 2, L) - L / 2
        total = np.exp(-d * d / (4 * t0))
        m = 1
        # smallest possible distance of an image at shift m is (m - 1/2) L
        while math.exp(-((m - 0.5) * L) ** 2 / (4 * t0)) > SEED_TRUNCATION:
            total += np.exp(-(d + m * L) ** 2 / (4 * t0)) + np.exp(-(d - m * L) ** 2 / (4 * t0))
            m += 1
        factors.append(total / math.sqrt(4 * math.pi * t0))
    out = factors[0]
    for f in factors[1:]:
        out = np.multiply.outer(out, f)
    return out


def mass_rate(grid: Grid, spec: DriftSpec, rho: np.ndarray) -> float:
    divX = sum(numerics.spectral_derivative(spec.X[a], grid, a, 1) for a in range(grid.dim))
    return float(grid.integrate(rho * (spec.U - divX)))


def mass_balance_check(traj: Trajectory, spec: DriftSpec) -> float:
    """Relative residual of ``d/dt mass = int rho (U - div X)`` over each snapshot interval.

    The right side is integrated in time with the trapezoidal rule.
    """
    rates = np.array([mass_rate(traj.grid, spec, s) for s in traj.snapshots])
    dm = np.diff(traj.mass)
    trap = 0.5 * (rates[1:] + rates[:-1]) * np.diff(traj.times)
    return float(np.abs(dm - trap).max() / np.abs(traj.mass).max())


# ---------------------------------------------------------------------------
# independent finite-difference oracle


def _fd_derivative(rho: np.ndarray, axis: int, h: float, order: int) -> np.ndarray:
    plus = np.roll(rho, -1, axis=axis)
    minus = np.roll(rho, 1, axis=axis)
    if order == 1:
        return (plus - minus) / (2 * h)
    return (plus - 2 * rho + minus) / (h * h)


def fd_solve(model: FlatTorus, spec: DriftSpec, rho0: np.ndarray, t_start: float, t_end: float,
             dt: float | None = None) -> tuple[np.ndarray, float]:
    """Forward-Euler / centred second-order finite differences; returns ``(rho(t_end), dt_used)``."""
    grid = model.grid
    h = grid.spacing
    n = grid.dim
    bound = 0.4 * min(h) ** 2 / n
    dt = bound if dt is None else min(dt, bound)
    nsteps = max(1, math.ceil((t_end - t_start) / dt - 1e-9))
    dt = (t_end - t_start) / nsteps
    rho = np.array(rho0, dtype=float)
    X, U = spec.X, spec.U
    for _ in range(nsteps):
        rhs = U * rho
        for a in range(n):
            rhs = rhs + _fd_derivative(rho, a, h[a], 2) + X[a] * _fd_derivative(rho, a, h[a], 1)
        rho = rho + dt * rhs
    return rho, dt
