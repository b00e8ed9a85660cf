"""Grids, spectral calculus, small symmetric eigensolvers and ODE helpers.

Every grid lives on a flat torus ``prod [0, L_i)``. Fields are plain numpy
arrays whose trailing axes carry the grid shape; vector fields put the
component axis first, matrix fields the two component axes first.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

JACOBI_THRESHOLD = 1e-14
JACOBI_MAX_SWEEPS = 100
KCOTH_SERIES_SWITCH = 1e-4


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on the torus ``prod [0, period_i)``."""

    points: tuple[int, ...]
    periods: tuple[float, ...]

    def __post_init__(self):
        points = tuple(int(m) for m in np.atleast_1d(self.points))
        periods = tuple(float(L) for L in np.atleast_1d(self.periods))
        if len(periods) == 1 and len(points) > 1:
            periods = periods * len(points)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "periods", periods)
        if not 1 <= len(points) <= 3:
            raise ValueError(f"grid dimension must be 1..3, got {len(points)}")
        if len(periods) != len(points):
            raise ValueError("periods and points must have the same length")
        for m in points:
            if m < 8 or m % 2:
                raise ValueError(f"points per axis must be even and >= 8, got {m}")
        for L in periods:
            if not (L > 0 and math.isfinite(L)):
                raise ValueError(f"periods must be positive, got {L}")

    @classmethod
    def uniform(cls, dim: int, points: int, period: float) -> "Grid":
        return cls((points,) * dim, (period,) * dim)

    @property
    def dim(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points

    @property
    def size(self) -> int:
        return int(np.prod(self.points))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / m for L, m in zip(self.periods, self.points))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.periods))

    def axis_nodes(self, axis: int) -> np.ndarray:
        return np.arange(self.points[axis]) * self.spacing[axis]

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(dim, *shape)``."""
        axes = [self.axis_nodes(a) for a in range(self.dim)]
        return np.array(np.meshgrid(*axes, indexing="ij"))

    def wavenumbers(self, axis: int) -> np.ndarray:
        m, h = self.points[axis], self.spacing[axis]
        return 2.0 * np.pi * np.fft.fftfreq(m, d=h)

    def refined(self, factor: int = 2) -> "Grid":
        return Grid(tuple(m * factor for m in self.points), self.periods)

    def node(self, index: Sequence[int]) -> np.ndarray:
        return np.array([i * h for i, h in zip(index, self.spacing)])

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Rectangle-rule quadrature over the trailing grid axes (spectrally exact)."""
        axes = tuple(range(-self.dim, 0))
        return np.sum(values, axis=axes) * self.cell_volume


def _check_field(values: np.ndarray, grid: Grid) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape[values.ndim - grid.dim:] != grid.shape:
        raise ValueError(
            f"field shape {values.shape} does not end with grid shape {grid.shape}"
        )
    if not np.all(np.isfinite(values)):
        raise ValueError("field contains non-finite values")
    return values


def _multiplier(grid: Grid, axis: int, order: int) -> np.ndarray:
    k = grid.wavenumbers(axis)
    mult = (1j * k) ** order
    if order % 2 == 1:
        # odd derivatives of the Nyquist mode are not representable on the grid
        mult[grid.points[axis] // 2] = 0.0
    return mult


def partial(values: np.ndarray, grid: Grid, alpha: Sequence[int]) -> np.ndarray:
    """Mixed spectral derivative ``d^alpha`` over the trailing grid axes."""
    values = _check_field(values, grid)
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != grid.dim or any(a < 0 for a in alpha):
        raise ValueError(f"bad multi-index {alpha} for a {grid.dim}-d grid")
    if sum(alpha) == 0:
        return values.copy()
    axes = tuple(range(values.ndim - grid.dim, values.ndim))
    spec = np.fft.fftn(values, axes=axes)
    for a, order in enumerate(alpha):
        if order:
            shape = [1] * values.ndim
            shape[axes[a]] = grid.points[a]
            spec = spec * _multiplier(grid, a, order).reshape(shape)
    return np.fft.ifftn(spec, axes=axes).real


def spectral_derivative(values: np.ndarray, grid: Grid, axis: int, order: int = 1) -> np.ndarray:
    """Fourier derivative of a scalar field along one axis (order 1 or 2)."""
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    if not 0 <= axis < grid.dim:
        raise ValueError(f"axis {axis} out of range for a {grid.dim}-d grid")
    alpha = [0] * grid.dim
    alpha[axis] = order
    return partial(values, grid, alpha)


def gradient(values: np.ndarray, grid: Grid) -> np.ndarray:
    return np.array([spectral_derivative(values, grid, a, 1) for a in range(grid.dim)])


def hessian(values: np.ndarray, grid: Grid) -> np.ndarray:
    n = grid.dim
    out = np.empty((n, n) + values.shape)
    for i in range(n):
        for j in range(i, n):
            alpha = [0] * n
            alpha[i] += 1
            alpha[j] += 1
            out[i, j] = out[j, i] = partial(values, grid, alpha)
    return out


def laplacian(values: np.ndarray, grid: Grid) -> np.ndarray:
    return sum(spectral_derivative(values, grid, a, 2) for a in range(grid.dim))


class TrigInterpolant:
    """Evaluate the trigonometric interpolant of grid data (and its derivatives) off-grid.

    The Nyquist mode of an even-sized axis is folded into a cosine so the
    interpolant is real and reproduces the samples at the nodes.
    """

    def __init__(self, values: np.ndarray, grid: Grid):
        values = _check_field(values, grid)
        if values.shape != grid.shape:
            raise ValueError("TrigInterpolant expects a scalar field")
        self.grid = grid
        self.coeffs = np.fft.fftn(values) / grid.size

    def _axis_basis(self, axis: int, x: float, order: int) -> np.ndarray:
        m = self.grid.points[axis]
        k = self.grid.wavenumbers(axis)
        basis = (1j * k) ** order * np.exp(1j * k * x)
        kn = abs(k[m // 2])
        basis[m // 2] = kn**order * np.cos(kn * x + order * np.pi / 2)
        return basis

    def __call__(self, point: Sequence[float], alpha: Sequence[int] | None = None) -> float:
        n = self.grid.dim
        alpha = (0,) * n if alpha is None else tuple(alpha)
        out = self.coeffs
        for a in reversed(range(n)):
            out = out @ self._axis_basis(a, float(point[a]), alpha[a])
        return float(np.real(out))

    def derivatives(self, point: Sequence[float], max_order: int) -> dict[tuple[int, ...], float]:
        """All mixed derivatives up to ``max_order`` at one point, keyed by multi-index."""
        n = self.grid.dim
        bases = [
            [self._axis_basis(a, float(point[a]), p) for p in range(max_order + 1)]
            for a in range(n)
        ]
        result = {}
        for alpha in multi_indices(n, max_order):
            out = self.coeffs
            for a in reversed(range(n)):
                out = out @ bases[a][alpha[a]]
            result[alpha] = float(np.real(out))
        return result


def multi_indices(dim: int, max_order: int) -> list[tuple[int, ...]]:
    return [
        alpha
        for alpha in itertools.product(range(max_order + 1), repeat=dim)
        if sum(alpha) <= max_order
    ]


def index_to_alpha(index: Sequence[int], dim: int) -> tuple[int, ...]:
    alpha = [0] * dim
    for i in index:
        alpha[i] += 1
    return tuple(alpha)


def _set_partitions(items: tuple[int, ...]):
    if len(items) == 1:
        yield [items]
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        for k in range(len(part)):
            yield part[:k] + [(first,) + part[k]] + part[k + 1:]
        yield [(first,)] + part


def log_derivative_from_moments(moments: Callable[[tuple[int, ...]], np.ndarray],
                                index: Sequence[int], dim: int) -> np.ndarray:
    """``d_{i1..ik} log rho`` from the ratios ``m_alpha = d^alpha rho / rho``.

    Uses the moment-to-cumulant expansion over set partitions of the index list.
    """
    positions = tuple(range(len(index)))
    total = 0.0
    for part in _set_partitions(positions):
        nb = len(part)
        term = (-1) ** (nb - 1) * math.factorial(nb - 1)
        for block in part:
            term = term * moments(index_to_alpha([index[p] for p in block], dim))
        total = total + term
    return total


class LogDerivatives:
    """Derivatives of ``log rho`` on a grid, computed from spectral derivatives of ``rho``.

    ``rho`` itself is smooth and periodic even when ``log rho`` is not resolvable
    (Gaussian tails, antipodal kinks), so the ratios ``d^alpha rho / rho`` are formed
    pointwise and combined into cumulants.
    """

    def __init__(self, rho: np.ndarray, grid: Grid):
        rho = _check_field(rho, grid)
        if np.min(rho) <= 0:
            raise ValueError("rho must be strictly positive")
        self.rho = rho
        self.grid = grid
        self._moments: dict[tuple[int, ...], np.ndarray] = {}
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    def moment(self, alpha: tuple[int, ...]) -> np.ndarray:
        if alpha not in self._moments:
            self._moments[alpha] = partial(self.rho, self.grid, alpha) / self.rho
        return self._moments[alpha]

    def __call__(self, *index: int) -> np.ndarray:
        key = tuple(sorted(index))
        if key not in self._cache:
            self._cache[key] = log_derivative_from_moments(self.moment, key, self.grid.dim)
        return self._cache[key]

    def gradient(self) -> np.ndarray:
        return np.array([self(i) for i in range(self.grid.dim)])

    def hessian(self) -> np.ndarray:
        n = self.grid.dim
        return np.array([[self(i, j) for j in range(n)] for i in range(n)])

    def laplacian(self) -> np.ndarray:
        return sum(self(i, i) for i in range(self.grid.dim))


def log_derivatives_at(rho_derivs: dict[tuple[int, ...], float], index: Sequence[int],
                       dim: int) -> float:
    """Pointwise variant of :class:`LogDerivatives` from interpolated ``d^alpha rho``."""
    rho = rho_derivs[(0,) * dim]
    return log_derivative_from_moments(lambda a: rho_derivs[a] / rho, tuple(sorted(index)), dim)


# ---------------------------------------------------------------------------
# symmetric eigenproblems


@dataclass(frozen=True)
class SymSpectrum:
    eigenvalues: np.ndarray
    dim: int


def jacobi_eigh(matrices: np.ndarray, threshold: float = JACOBI_THRESHOLD,
                max_sweeps: int = JACOBI_MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigensolver, vectorised over a batch of symmetric matrices.

    Parameters
    ----------
    matrices : array, shape (..., n, n)
    threshold : float
        Sweeps stop once every off-diagonal entry is below ``threshold`` times
        the Frobenius norm of its matrix.

    Returns
    -------
    w : array (..., n)
        Eigenvalues in ascending order.
    V : array (..., n, n)
        Orthonormal eigenvectors in the columns, matching ``w``.
    """
    a = np.array(matrices, dtype=float, copy=True)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError("expected a batch of square matrices")
    n = a.shape[-1]
    batch = a.shape[:-2]
    a = a.reshape((-1, n, n))
    v = np.broadcast_to(np.eye(n), a.shape).copy()
    scale = np.sqrt(np.sum(a * a, axis=(1, 2)))
    scale = np.where(scale > 0, scale, 1.0)
    for _ in range(max_sweeps):
        off = np.abs(a[:, ~np.eye(n, dtype=bool)]).max(axis=1, initial=0.0) if n > 1 else np.zeros(len(a))
        if np.all(off <= threshold * scale):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[:, p, q]
                active = np.abs(apq) > threshold * scale * 1e-3
                if not np.any(active):
                    continue
                safe = np.where(active, apq, 1.0)
                theta = (a[:, q, q] - a[:, p, p]) / (2.0 * safe)
                t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                t = np.where(theta == 0, 1.0, t)
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) rotation
                ap = a[:, :, p].copy()
                aq = a[:, :, q].copy()
                a[:, :, p] = c[:, None] * ap - s[:, None] * aq
                a[:, :, q] = s[:, None] * ap + c[:, None] * aq
                ap = a[:, p, :].copy()
                aq = a[:, q, :].copy()
                a[:, p, :] = c[:, None] * ap - s[:, None] * aq
                a[:, q, :] = s[:, None] * ap + c[:, None] * aq
                vp = v[:, :, p].copy()
                vq = v[:, :, q].copy()
                v[:, :, p] = c[:, None] * vp - s[:, None] * vq
                v[:, :, q] = s[:, None] * vp + c[:, None] * vq
    w = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    return w.reshape(batch + (n,)), v.reshape(batch + (n, n))


def sym_eigs(matrix: np.ndarray, tol: float = 1e-10) -> SymSpectrum:
    """Ascending eigenvalues of one small symmetric matrix."""
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite values")
    if np.max(np.abs(a - a.T), initial=0.0) > tol:
        raise ValueError("matrix is not symmetric")
    w, _ = jacobi_eigh(0.5 * (a + a.T))
    return SymSpectrum(eigenvalues=w, dim=a.shape[0])


def field_eigenvalues(matrix_field: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of a symmetric matrix field ``(n, n, *shape)`` -> ``(n, *shape)``."""
    m = np.asarray(matrix_field, dtype=float)
    sym = 0.5 * (m + np.swapaxes(m, 0, 1))
    batch = np.moveaxis(sym, (0, 1), (-2, -1))
    w, _ = jacobi_eigh(batch)
    return np.moveaxis(w, -1, 0)


def lambda_min(matrix_field: np.ndarray) -> np.ndarray:
    return field_eigenvalues(matrix_field)[0]


def lambda_max(matrix_field: np.ndarray) -> np.ndarray:
    return field_eigenvalues(matrix_field)[-1]


# ---------------------------------------------------------------------------
# comparison functions and ODEs


def kcoth(k: float, t: float) -> float:
    """``k * coth(k t)``, continuous down to ``k = 0`` where it equals ``1/t``."""
    if not t > 0:
        raise ValueError(f"t must be positive, got {t}")
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    if k == 0:
        return 1.0 / t
    x = k * t
    if x < KCOTH_SERIES_SWITCH:
        return 1.0 / t + k * x / 3.0 - k * x**3 / 45.0
    return k / math.tanh(x)


def rk4_integrate(rhs: Callable[[float, np.ndarray], np.ndarray], y0, t0: float, t1: float,
                  dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Classical RK4 with a uniform step no larger than ``dt``.

    Returns the sample times and the states stacked along the first axis.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not t1 >= t0:
        raise ValueError("t1 must not precede t0")
    y = np.array(y0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("initial state is not finite")
    nsteps = max(1, int(math.ceil((t1 - t0) / dt - 1e-9))) if t1 > t0 else 0
    h = (t1 - t0) / nsteps if nsteps else 0.0
    times = t0 + h * np.arange(nsteps + 1)
    states = np.empty((nsteps + 1,) + y.shape)
    states[0] = y
    for i in range(nsteps):
        t = times[i]
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"non-finite state at t={times[i + 1]}")
        states[i + 1] = y
    return times, states


def riccati_comparison(k: float, t0: float, t1: float, lambda0: float,
                       dt: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Integrate the equality case ``lambda' = k^2 - lambda^2`` from ``lambda(t0) = lambda0``."""
    if not (t1 > t0 > 0):
        raise ValueError("need t1 > t0 > 0")
    if k < 0:
        raise ValueError("k must be non-negative")
    times, states = rk4_integrate(lambda t, y: k * k - y * y, np.array([lambda0]), t0, t1, dt)
    return times, states[:, 0]
