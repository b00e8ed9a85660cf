"""Model manifolds and their Riemannian / Kähler geometry.

Three models are supported:

* :class:`FlatTorus` - flat metric on a 1-3 dimensional torus (grid PDE support);
* :class:`ConformalTorus` - ``e^{2 phi}`` times the flat metric on a 2-torus, with
  ``phi`` given on a grid and evaluated spectrally off-grid;
* :class:`Sphere2` - the round sphere in the chart ``(theta, azimuth)``; pointwise only.

Tensor conventions used throughout:

* ``Rm(X, Y) Z = nabla_X nabla_Y Z - nabla_Y nabla_X Z - nabla_[X,Y] Z``, so the
  round sphere has ``<Rm(v, w) w, v> > 0``.
* Orthonormal-frame components ``Rm[a, b, c, d] = <Rm(e_a, e_b) e_c, e_d>``.
* Matrices of linear maps are stored as ``M[i, j] = <L e_i, e_j>``; applying the
  map to a component vector is therefore ``v @ M``. The complex structure uses the
  same convention, ``J[i, j] = <J e_i, e_j>``.
* ``nabla_rm[c, a, b, d, f] = <(nabla_{e_c} Rm)(e_a, e_b) e_d, e_f>``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from . import numerics
from .numerics import Grid, TrigInterpolant

POLE_EXCLUSION = 1e-3
_FD_STEP = 1e-3


class ChartError(ValueError):
    """Evaluation point outside the model chart."""


class NoComplexStructure(ValueError):
    """The model carries no complex structure."""


class NoGridSupport(ValueError):
    """The model has no grid on which PDE operators can act."""


def standard_complex_structure(dim: int) -> np.ndarray:
    """Block rotation with ``J e_{2i} = e_{2i+1}``."""
    if dim % 2:
        raise NoComplexStructure(f"no complex structure in odd dimension {dim}")
    J = np.zeros((dim, dim))
    for i in range(0, dim, 2):
        J[i, i + 1] = 1.0
        J[i + 1, i] = -1.0
    return J


def riemann_from_christoffel(gamma: np.ndarray, dgamma: np.ndarray) -> np.ndarray:
    """Coordinate components ``R[i, j, k, l]`` with ``Rm(d_i, d_j) d_k = R[i,j,k,l] d_l``.

    ``gamma[k, i, j] = Gamma^k_ij`` and ``dgamma[m, k, i, j] = d_m Gamma^k_ij``.
    """
    R = np.einsum("iljk->ijkl", dgamma) - np.einsum("jlik->ijkl", dgamma)
    R += np.einsum("mjk,lim->ijkl", gamma, gamma) - np.einsum("mik,ljm->ijkl", gamma, gamma)
    return R


class ManifoldModel:
    """Common pointwise machinery; subclasses supply metric, Christoffels and frame."""

    dim: int
    J: np.ndarray | None = None
    grid: Grid | None = None

    # -- to be provided by subclasses
    def check_point(self, point) -> np.ndarray:
        return np.asarray(point, dtype=float)

    def metric(self, point) -> np.ndarray:
        raise NotImplementedError

    def christoffel(self, point) -> np.ndarray:
        raise NotImplementedError

    def christoffel_derivative(self, point) -> np.ndarray:
        raise NotImplementedError

    @property
    def has_complex_structure(self) -> bool:
        return self.J is not None

    def require_complex_structure(self) -> np.ndarray:
        if self.J is None:
            raise NoComplexStructure(f"{type(self).__name__} has no complex structure")
        return self.J

    def require_grid(self) -> Grid:
        if self.grid is None:
            raise NoGridSupport(f"{type(self).__name__} supports pointwise geometry only")
        return self.grid

    # -- derived pointwise quantities
    def frame(self, point) -> np.ndarray:
        """Orthonormal frame by Gram-Schmidt of the coordinate frame; columns are ``e_a``."""
        g = self.metric(point)
        n = self.dim
        E = np.zeros((n, n))
        for a in range(n):
            v = np.zeros(n)
            v[a] = 1.0
            for b in range(a):
                v = v - (v @ g @ E[:, b]) * E[:, b]
            E[:, a] = v / math.sqrt(v @ g @ v)
        return E

    def riemann(self, point) -> np.ndarray:
        """Frame components ``<Rm(e_a, e_b) e_c, e_d>``."""
        point = self.check_point(point)
        R = riemann_from_christoffel(self.christoffel(point), self.christoffel_derivative(point))
        E = self.frame(point)
        g = self.metric(point)
        return np.einsum("ia,jb,kc,ijkl,lm,md->abcd", E, E, E, R, g, E)

    def connection(self, point) -> np.ndarray:
        """Frame connection ``w[c, a, d] = <nabla_{e_c} e_a, e_d>``."""
        point = self.check_point(point)
        n = self.dim
        dE = np.array([_central_diff(lambda p: self.frame(p), point, i) for i in range(n)])
        gamma = self.christoffel(point)
        E = self.frame(point)
        g = self.metric(point)
        # nabla_{e_c} e_a in coordinates
        nab = np.einsum("ic,ika->cak", E, dE) + np.einsum("ic,kij,ja->cak", E, gamma, E)
        return np.einsum("cak,kl,ld->cad", nab, g, E)

    def nabla_rm(self, point) -> np.ndarray:
        """Covariant derivative of the curvature tensor by covariant differencing."""
        point = self.check_point(point)
        n = self.dim
        dR = np.array([_central_diff(self.riemann, point, i) for i in range(n)])
        E = self.frame(point)
        w = self.connection(point)
        R = self.riemann(point)
        out = np.einsum("ic,iabdf->cabdf", E, dR)
        out -= np.einsum("cag,gbdf->cabdf", w, R)
        out -= np.einsum("cbg,agdf->cabdf", w, R)
        out -= np.einsum("cdg,abgf->cabdf", w, R)
        out -= np.einsum("cfg,abdg->cabdf", w, R)
        return out

    def nabla_J(self, point) -> np.ndarray:
        """``(nabla_{e_c} J)(e_a, e_b)`` for the frame-constant complex structure."""
        J = self.require_complex_structure()
        w = self.connection(point)
        return -(np.einsum("cag,gb->cab", w, J) + np.einsum("cbg,ag->cab", w, J))


def _central_diff(fn, point: np.ndarray, axis: int, step: float = _FD_STEP) -> np.ndarray:
    """Fourth-order central difference of ``fn`` along coordinate ``axis``."""
    e = np.zeros_like(point)
    e[axis] = step
    return (
        -fn(point + 2 * e) + 8 * fn(point + e) - 8 * fn(point - e) + fn(point - 2 * e)
    ) / (12 * step)


class FlatTorus(ManifoldModel):
    def __init__(self, dim: int, periods: Sequence[float] | float, points: Sequence[int] | int = 64):
        periods = tuple(np.broadcast_to(np.asarray(periods, dtype=float), (dim,)))
        points = tuple(np.broadcast_to(np.asarray(points, dtype=int), (dim,)))
        self.dim = dim
        self.grid = Grid(points, periods)
        self.J = standard_complex_structure(dim) if dim % 2 == 0 else None

    def __repr__(self):
        return f"FlatTorus(dim={self.dim}, periods={self.grid.periods}, points={self.grid.points})"

    def metric(self, point):
        return np.eye(self.dim)

    def christoffel(self, point):
        return np.zeros((self.dim,) * 3)

    def christoffel_derivative(self, point):
        return np.zeros((self.dim,) * 4)

    def frame(self, point):
        return np.eye(self.dim)

    def connection(self, point):
        return np.zeros((self.dim,) * 3)

    # -- grid data
    def frame_scale(self) -> np.ndarray:
        return np.ones(self.grid.shape)

    def grid_connection(self) -> np.ndarray:
        return np.zeros((self.dim,) * 3 + self.grid.shape)

    def grid_riemann(self) -> np.ndarray:
        return np.zeros((self.dim,) * 4 + self.grid.shape)


class ConformalTorus(ManifoldModel):
    """``g = e^{2 phi} (dx^2 + dy^2)`` on a 2-torus; ``phi`` sampled on ``grid``."""

    def __init__(self, grid: Grid, phi: np.ndarray):
        if grid.dim != 2:
            raise ValueError("ConformalTorus lives on a 2-torus")
        phi = np.asarray(phi, dtype=float)
        if phi.shape != grid.shape or not np.all(np.isfinite(phi)):
            raise ValueError("phi must be a finite field on the grid")
        self.dim = 2
        self.grid = grid
        self.phi = phi
        self.J = standard_complex_structure(2)
        self._interp = TrigInterpolant(phi, grid)

    def __repr__(self):
        return f"ConformalTorus(periods={self.grid.periods}, points={self.grid.points})"

    def _phi_derivs(self, point):
        return self._interp.derivatives(point, 2)

    def metric(self, point):
        return math.exp(2 * self._interp(point)) * np.eye(2)

    def christoffel(self, point):
        d = self._phi_derivs(point)
        dphi = np.array([d[(1, 0)], d[(0, 1)]])
        I = np.eye(2)
        # Gamma^k_ij = delta_ik phi_j + delta_jk phi_i - delta_ij phi_k
        return (np.einsum("ik,j->kij", I, dphi) + np.einsum("jk,i->kij", I, dphi)
                - np.einsum("ij,k->kij", I, dphi))

    def christoffel_derivative(self, point):
        d = self._phi_derivs(point)
        hess = np.array([[d[(2, 0)], d[(1, 1)]], [d[(1, 1)], d[(0, 2)]]])
        I = np.eye(2)
        return (np.einsum("ik,jl->lkij", I, hess) + np.einsum("jk,il->lkij", I, hess)
                - np.einsum("ij,kl->lkij", I, hess))

    def frame(self, point):
        return math.exp(-self._interp(point)) * np.eye(2)

    def gauss_curvature_at(self, point) -> float:
        d = self._phi_derivs(point)
        return -math.exp(-2 * d[(0, 0)]) * (d[(2, 0)] + d[(0, 2)])

    # -- grid data
    def frame_scale(self) -> np.ndarray:
        return np.exp(-self.phi)

    def grid_connection(self) -> np.ndarray:
        """``w[c, a, d] = e^{-phi} (delta_cd phi_a - delta_ca phi_d)`` on the grid."""
        dphi = numerics.gradient(self.phi, self.grid)
        s = np.exp(-self.phi)
        I = np.eye(2)
        w = np.einsum("cd,a...->cad...", I, dphi) - np.einsum("ca,d...->cad...", I, dphi)
        return w * s

    def gauss_curvature(self) -> np.ndarray:
        return -np.exp(-2 * self.phi) * numerics.laplacian(self.phi, self.grid)

    def grid_riemann(self) -> np.ndarray:
        I = np.eye(2)
        base = np.einsum("bc,ad->abcd", I, I) - np.einsum("ac,bd->abcd", I, I)
        return np.einsum("abcd,...->abcd...", base, self.gauss_curvature())


class Sphere2(ManifoldModel):
    """Round sphere of radius ``radius`` in the chart ``(theta, azimuth)``."""

    def __init__(self, radius: float = 1.0):
        if not radius > 0:
            raise ValueError("radius must be positive")
        self.dim = 2
        self.radius = float(radius)
        self.J = standard_complex_structure(2)

    def __repr__(self):
        return f"Sphere2(radius={self.radius})"

    def check_point(self, point):
        point = np.asarray(point, dtype=float)
        theta = point[0]
        if theta < POLE_EXCLUSION or theta > math.pi - POLE_EXCLUSION:
            raise ChartError(f"theta={theta} is within {POLE_EXCLUSION} rad of a pole")
        return point

    def metric(self, point):
        theta = self.check_point(point)[0]
        r2 = self.radius**2
        return np.diag([r2, r2 * math.sin(theta) ** 2])

    def christoffel(self, point):
        theta = self.check_point(point)[0]
        G = np.zeros((2, 2, 2))
        G[0, 1, 1] = -math.sin(theta) * math.cos(theta)
        G[1, 0, 1] = G[1, 1, 0] = math.cos(theta) / math.sin(theta)
        return G

    def christoffel_derivative(self, point):
        theta = self.check_point(point)[0]
        dG = np.zeros((2, 2, 2, 2))
        dG[0, 0, 1, 1] = -math.cos(2 * theta)
        dG[0, 1, 0, 1] = dG[0, 1, 1, 0] = -1.0 / math.sin(theta) ** 2
        return dG

    def frame(self, point):
        theta = self.check_point(point)[0]
        return np.diag([1.0 / self.radius, 1.0 / (self.radius * math.sin(theta))])


# ---------------------------------------------------------------------------
# pointwise operations


def christoffel(model: ManifoldModel, point) -> np.ndarray:
    return model.christoffel(model.check_point(point))


@dataclass
class CurvatureData:
    point: np.ndarray
    Rm: np.ndarray
    Rc: np.ndarray
    J: np.ndarray | None = field(default=None, repr=False)

    def apply(self, x, y, z) -> np.ndarray:
        """Frame components of ``Rm(x, y) z``."""
        return np.einsum("a,b,c,abcd->d", x, y, z, self.Rm)

    def sectional(self, v, w) -> float:
        v, w = np.asarray(v, float), np.asarray(w, float)
        area = (v @ v) * (w @ w) - (v @ w) ** 2
        return float(self.apply(v, w, w) @ v / area)

    def bisectional(self, v, w) -> float:
        if self.J is None:
            raise NoComplexStructure("bisectional curvature needs a complex structure")
        v, w = np.asarray(v, float), np.asarray(w, float)
        Jw = w @ self.J
        return float(self.apply(v, w, w) @ v + self.apply(v, Jw, Jw) @ v)

    def symmetry_residual(self) -> float:
        R = self.Rm
        bianchi = R + np.einsum("bcad->abcd", R) + np.einsum("cabd->abcd", R)
        return float(max(
            np.abs(R + np.swapaxes(R, 0, 1)).max(),
            np.abs(R + np.swapaxes(R, 2, 3)).max(),
            np.abs(R - np.einsum("cdab->abcd", R)).max(),
            np.abs(bianchi).max(),
        ))


def curvature(model: ManifoldModel, point) -> CurvatureData:
    point = model.check_point(point)
    Rm = model.riemann(point)
    # Rc(y, z) = sum_c <Rm(e_c, y) z, e_c>
    Rc = np.einsum("cbdc->bd", Rm)
    return CurvatureData(point=point, Rm=Rm, Rc=0.5 * (Rc + Rc.T), J=model.J)


def check_kahler_identities(model: ManifoldModel, sample_points, sample_vectors) -> float:
    """Max residual of ``Rm(JX1, JX2) X3 = Rm(X1, X2) X3`` and ``Rm(X1, X2) J X3 = J Rm(X1, X2) X3``."""
    J = model.require_complex_structure()
    vecs = np.atleast_2d(np.asarray(sample_vectors, dtype=float))
    worst = 0.0
    for p in sample_points:
        Rm = model.riemann(model.check_point(p))
        scale = max(1.0, np.abs(Rm).max())
        for x1 in vecs:
            for x2 in vecs:
                for x3 in vecs:
                    base = np.einsum("a,b,c,abcd->d", x1, x2, x3, Rm)
                    p1 = np.einsum("a,b,c,abcd->d", x1 @ J, x2 @ J, x3, Rm) - base
                    p2 = np.einsum("a,b,c,abcd->d", x1, x2, x3 @ J, Rm) - base @ J
                    worst = max(worst, np.abs(p1).max() / scale, np.abs(p2).max() / scale)
    return float(worst)


def _nabla_rm_apply(nrm, z, a, b, c):
    return np.einsum("c,a,b,d,cabdf->f", z, a, b, c, nrm)


def lemma_rm_trace(model: ManifoldModel, X, point) -> tuple[np.ndarray, np.ndarray, float]:
    """Both sides of the Kähler trace relation for ``nabla Rm`` at ``point``.

    lhs = sum_i nabla Rm(X, X, e_i) e_i + nabla Rm(JX, JX, e_i) e_i
    rhs = sum_i nabla Rm(e_i, e_i, X) X + nabla Rm(e_i, e_i, JX) JX
    """
    J = model.require_complex_structure()
    point = model.check_point(point)
    nrm = model.nabla_rm(point)
    X = np.asarray(X, dtype=float)
    JX = X @ J
    n = model.dim
    lhs = np.zeros(n)
    rhs = np.zeros(n)
    for e in np.eye(n):
        lhs += _nabla_rm_apply(nrm, X, X, e, e) + _nabla_rm_apply(nrm, JX, JX, e, e)
        rhs += _nabla_rm_apply(nrm, e, e, X, X) + _nabla_rm_apply(nrm, e, e, JX, JX)
    return lhs, rhs, float(np.abs(lhs - rhs).max())


@dataclass
class TransportResult:
    times: np.ndarray
    points: np.ndarray
    vectors: np.ndarray          # coordinate components
    frame_vectors: np.ndarray    # orthonormal-frame components
    norms: np.ndarray


def parallel_transport(model: ManifoldModel, times, points, v0, dt: float | None = None,
                       max_step: float | None = None) -> TransportResult:
    """Transport ``v0`` (orthonormal-frame components at ``points[0]``) along a sampled curve.

    The curve is interpolated by a cubic spline through the samples; the transport
    equation ``dv^k/dt = -Gamma^k_ij c'^i v^j`` is integrated by RK4 between samples.
    """
    times = np.asarray(times, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape != (len(times), model.dim):
        raise ValueError("points must have shape (len(times), dim)")
    for p in points:
        model.check_point(p)
    if max_step is None:
        max_step = min(model.grid.spacing) if model.grid is not None else 0.1
    jumps = np.abs(np.diff(points, axis=0)).max(initial=0.0)
    if jumps > max_step:
        raise ChartError(f"curve samples jump by {jumps:.3g} > {max_step:.3g}")
    spline = CubicSpline(times, points, axis=0)
    velocity = spline.derivative()

    def rhs(t, v):
        p = spline(t)
        return -np.einsum("kij,i,j->k", model.christoffel(model.check_point(p)), velocity(t), v)

    E0 = model.frame(points[0])
    v = E0 @ np.asarray(v0, dtype=float)
    out = [v]
    for t0, t1 in zip(times[:-1], times[1:]):
        step = (t1 - t0) if dt is None else dt
        _, states = numerics.rk4_integrate(rhs, v, t0, t1, step)
        v = states[-1]
        out.append(v)
    vectors = np.array(out)
    frame_vectors = np.array([np.linalg.solve(model.frame(p), v) for p, v in zip(points, vectors)])
    norms = np.array([math.sqrt(v @ model.metric(p) @ v) for p, v in zip(points, vectors)])
    return TransportResult(times, points, vectors, frame_vectors, norms)


# ---------------------------------------------------------------------------
# covariant operators on grids


class CovariantOps:
    """Covariant calculus in the orthonormal frame of a grid model.

    Vector fields are frame components ``(n, *shape)``; two-tensors ``(n, n, *shape)``.
    """

    def __init__(self, model: ManifoldModel):
        self.model = model
        self.grid = model.require_grid()
        self.dim = model.dim
        self.scale = model.frame_scale()
        self.omega = model.grid_connection()

    def d(self, f: np.ndarray, a: int) -> np.ndarray:
        """Frame derivative ``e_a(f)``."""
        return self.scale * numerics.spectral_derivative(f, self.grid, a, 1)

    def gradient(self, f: np.ndarray) -> np.ndarray:
        return np.array([self.d(f, a) for a in range(self.dim)])

    def covariant_derivative(self, X: np.ndarray) -> np.ndarray:
        """``(nabla X)[a, b] = <nabla_{e_a} X, e_b>``."""
        n = self.dim
        out = np.array([[self.d(X[b], a) for b in range(n)] for a in range(n)])
        return out + np.einsum("c...,acb...->ab...", X, self.omega)

    def divergence(self, X: np.ndarray) -> np.ndarray:
        return np.trace(self.covariant_derivative(X))

    def hessian(self, f: np.ndarray) -> np.ndarray:
        H = self.covariant_derivative(self.gradient(f))
        return 0.5 * (H + np.swapaxes(H, 0, 1))

    def laplacian(self, f: np.ndarray) -> np.ndarray:
        return np.trace(self.hessian(f))

    def tensor_derivative(self, T: np.ndarray) -> np.ndarray:
        """``(nabla T)[c, a, b] = (nabla_{e_c} T)(e_a, e_b)``."""
        n = self.dim
        out = np.array([[[self.d(T[a, b], c) for b in range(n)] for a in range(n)]
                        for c in range(n)])
        out -= np.einsum("cag...,gb...->cab...", self.omega, T)
        out -= np.einsum("cbg...,ag...->cab...", self.omega, T)
        return out

    def tensor_divergence(self, T: np.ndarray) -> np.ndarray:
        """``(div T)_b = sum_a (nabla_{e_a} T)(e_a, e_b)``."""
        return np.einsum("aab...->b...", self.tensor_derivative(T))


def covariant_ops(model: ManifoldModel) -> CovariantOps:
    return CovariantOps(model)


def sectional_curvature_field(model: ManifoldModel) -> np.ndarray:
    """Minimum sectional curvature over coordinate planes at each node."""
    model.require_grid()
    if isinstance(model, ConformalTorus):
        return model.gauss_curvature()
    n = model.dim
    R = model.grid_riemann()
    if n == 1:
        return np.zeros(model.grid.shape)
    vals = [R[a, b, b, a] for a in range(n) for b in range(a + 1, n)]
    return np.min(vals, axis=0)


def ricci_field(model: ManifoldModel) -> np.ndarray:
    R = model.grid_riemann()
    Rc = np.einsum("cbdc...->bd...", R)
    return 0.5 * (Rc + np.swapaxes(Rc, 0, 1))
