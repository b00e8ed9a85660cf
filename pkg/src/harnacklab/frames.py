"""Flow lines of ``Y = -2 grad log rho - X``, parallel adapted frames, and the
residuals of the matrix identities satisfied along them.

Everything here lives on flat tori, where the frame ``e_a`` is the coordinate
frame, covariant derivatives are partial derivatives and parallel transport is
the identity. Matrices use ``M[a, b] = <M(e_a), e_b>``; a frame is stored as a
matrix ``V`` whose row ``i`` holds the components of ``v_i``, so that frame
components of a coordinate matrix ``M`` are ``V M V^T``.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fields import DerivedFields
from .geometry import FlatTorus
from .numerics import LogDerivatives, TrigInterpolant, log_derivatives_at, spectral_derivative
from .solver import Trajectory

log = logging.getLogger(__name__)

ORTHO_CORRECTION_THRESHOLD = 1e-10
UNIFORM_RTOL = 1e-9
DIRECTIONAL_STEP = 1e-3


def _require_flat(derived: DerivedFields) -> FlatTorus:
    model = derived.spec.model
    if not isinstance(model, FlatTorus):
        raise TypeError("frames are supported on flat tori only")
    return model


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _skew(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M - M.T)


def _check_positive(traj: Trajectory):
    if np.any(traj.min_rho <= 0):
        raise ValueError("trajectory contains non-positive rho")


# ---------------------------------------------------------------------------
# grid fields


def build_Y(traj: Trajectory, derived: DerivedFields) -> np.ndarray:
    """``Y_t = -2 grad log rho_t - X`` at every snapshot; shape ``(snapshots, n, *grid)``."""
    _require_flat(derived)
    _check_positive(traj)
    X = derived.spec.X
    return np.array([-2.0 * LogDerivatives(s, traj.grid).gradient() - X for s in traj.snapshots])


def _centred_triples(times: np.ndarray) -> list[int]:
    """Interior snapshot indices whose two neighbours are equally spaced."""
    if len(times) < 3:
        raise ValueError("at least 3 time samples are needed for centred differences")
    out = []
    for k in range(1, len(times) - 1):
        left, right = times[k] - times[k - 1], times[k + 1] - times[k]
        if abs(left - right) <= UNIFORM_RTOL * max(left, right):
            out.append(k)
    if not out:
        raise ValueError("no interior sample with equally spaced neighbours")
    return out


@dataclass
class GridResidual:
    """Per-snapshot sup-norm residual of an identity, over nodes with ``rho >= rel_floor max rho``."""

    id: str
    times: np.ndarray
    residuals: np.ndarray
    rel_floor: float

    @property
    def max(self) -> float:
        return float(np.max(self.residuals))


def eqY_residual(traj: Trajectory, derived: DerivedFields, rel_floor: float = 1e-6) -> GridResidual:
    """Residual of ``Y' + nabla_Y Y = grad div Y - A(Y) + grad W``."""
    _require_flat(derived)
    _check_positive(traj)
    keep = _centred_triples(traj.times)
    grid = traj.grid
    n = grid.dim
    X, A, gradX = derived.spec.X, derived.A, derived.gradX
    divX = derived.divX
    grad_divX = np.array([spectral_derivative(divX, grid, a, 1) for a in range(n)])
    gradW = derived.gradW
    residuals = []
    for k in keep:
        lds = [LogDerivatives(traj.snapshots[j], grid) for j in (k - 1, k, k + 1)]
        Ys = [-2.0 * ld.gradient() - X for ld in lds]
        dt = traj.times[k + 1] - traj.times[k - 1]
        Ydot = (Ys[2] - Ys[0]) / dt
        ld = lds[1]
        Y = Ys[1]
        # (grad Y)[a, b] = d_a Y_b
        G = -2.0 * ld.hessian() - gradX
        lhs = Ydot + np.einsum("a...,ab...->b...", Y, G)
        grad_lap = np.array([sum(ld(a, c, c) for c in range(n)) for a in range(n)])
        grad_divY = -2.0 * grad_lap - grad_divX
        rhs = grad_divY - np.einsum("a...,ab...->b...", Y, A) + gradW
        err = np.sqrt(np.sum((lhs - rhs) ** 2, axis=0))
        rho = traj.snapshots[k]
        mask = rho >= rel_floor * rho.max()
        residuals.append(float(err[mask].max()))
    return GridResidual("eqY", traj.times[keep], np.array(residuals), rel_floor)


def dlog_identity_residual(traj: Trajectory, derived: DerivedFields,
                           rel_floor: float = 1e-6) -> GridResidual:
    """Residual of ``d/dt log rho = Laplace log rho + |grad log rho + X/2|^2 - |X|^2/4 + U``."""
    _require_flat(derived)
    _check_positive(traj)
    keep = _centred_triples(traj.times)
    grid = traj.grid
    X, U = derived.spec.X, derived.spec.U
    quarter_X2 = 0.25 * np.sum(X * X, axis=0)
    residuals = []
    for k in keep:
        dt = traj.times[k + 1] - traj.times[k - 1]
        lhs = (np.log(traj.snapshots[k + 1]) - np.log(traj.snapshots[k - 1])) / dt
        rho = traj.snapshots[k]
        ld = LogDerivatives(rho, grid)
        g = ld.gradient() + 0.5 * X
        rhs = ld.laplacian() + np.sum(g * g, axis=0) - quarter_X2 + U
        mask = rho >= rel_floor * rho.max()
        residuals.append(float(np.abs(lhs - rhs)[mask].max()))
    return GridResidual("dlog", traj.times[keep], np.array(residuals), rel_floor)


# ---------------------------------------------------------------------------
# pointwise evaluation along flow lines


@dataclass
class LocalTensors:
    """Coordinate-frame tensors at one point and one snapshot."""

    Y: np.ndarray
    G: np.ndarray   # (grad Y)[a, b] = d_a Y_b
    A: np.ndarray
    D: np.ndarray   # D[a, b] = <(nabla_a A)(e_b), Y>
    E: np.ndarray   # Hessian of div Y
    F: np.ndarray   # Hessian of W
    B: np.ndarray   # gradient of grad div Y - A(Y) + grad W


class YField:
    """Off-grid access to ``Y`` and its derivatives through trigonometric interpolation."""

    def __init__(self, traj: Trajectory, derived: DerivedFields):
        model = _require_flat(derived)
        _check_positive(traj)
        self.traj = traj
        self.grid = traj.grid
        self.n = model.dim
        self.times = np.asarray(traj.times, dtype=float)
        self.periods = np.asarray(self.grid.periods, dtype=float)
        self._X = [TrigInterpolant(derived.spec.X[b], self.grid) for b in range(self.n)]
        self._W = TrigInterpolant(derived.W, self.grid)
        self._rho: dict[int, TrigInterpolant] = {}

    def _rho_interp(self, k: int) -> TrigInterpolant:
        if k not in self._rho:
            self._rho[k] = TrigInterpolant(self.traj.snapshots[k], self.grid)
        return self._rho[k]

    def snapshot_index(self, t: float) -> int | None:
        k = int(np.argmin(np.abs(self.times - t)))
        scale = max(1.0, abs(t))
        return k if abs(self.times[k] - t) <= 1e-9 * scale else None

    def velocity_at(self, x, k: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        rho = self._rho_interp(k)
        r0 = rho(x)
        if not r0 > 0:
            raise ValueError(f"interpolated rho is non-positive at x={x}")
        grad = np.array([rho(x, np.eye(self.n, dtype=int)[a]) for a in range(self.n)]) / r0
        X = np.array([interp(x) for interp in self._X])
        return -2.0 * grad - X

    def __call__(self, x, t: float) -> np.ndarray:
        """``Y(x, t)``; between snapshots, 4-point Lagrange interpolation in time."""
        k = self.snapshot_index(t)
        if k is not None:
            return self.velocity_at(x, k)
        if t < self.times[0] or t > self.times[-1]:
            raise ValueError(f"t={t} outside the trajectory window")
        j = int(np.searchsorted(self.times, t))
        lo = min(max(j - 2, 0), max(len(self.times) - 4, 0))
        idx = list(range(lo, min(lo + 4, len(self.times))))
        out = 0.0
        for i in idx:
            w = 1.0
            for m in idx:
                if m != i:
                    w *= (t - self.times[m]) / (self.times[i] - self.times[m])
            out = out + w * self.velocity_at(x, i)
        return out

    def local(self, x, k: int) -> LocalTensors:
        n = self.n
        x = np.asarray(x, dtype=float)
        rd = self._rho_interp(k).derivatives(x, 4)
        if not rd[(0,) * n] > 0:
            raise ValueError(f"interpolated rho is non-positive at x={x}")

        def L(*idx):
            return log_derivatives_at(rd, idx, n)

        def unit(*idx):
            alpha = [0] * n
            for i in idx:
                alpha[i] += 1
            return tuple(alpha)

        Xd = [interp.derivatives(x, 3) for interp in self._X]
        Wd = self._W.derivatives(x, 2)
        zero = (0,) * n
        X = np.array([Xd[b][zero] for b in range(n)])
        gradX = np.array([[Xd[b][unit(a)] for b in range(n)] for a in range(n)])
        Y = -2.0 * np.array([L(a) for a in range(n)]) - X
        G = -2.0 * np.array([[L(a, b) for b in range(n)] for a in range(n)]) - gradX
        A = gradX - gradX.T
        gradA = np.array([[[Xd[b][unit(c, a)] - Xd[a][unit(c, b)] for b in range(n)]
                           for a in range(n)] for c in range(n)])
        E = np.array([[-2.0 * sum(L(a, b, c, c) for c in range(n))
                       - sum(Xd[c][unit(a, b, c)] for c in range(n))
                       for b in range(n)] for a in range(n)])
        F = np.array([[Wd[unit(a, b)] for b in range(n)] for a in range(n)])
        D = np.einsum("abf,f->ab", gradA, Y)
        B = E + D + F - G @ A
        return LocalTensors(Y=Y, G=G, A=A, D=D, E=E, F=F, B=B)


# ---------------------------------------------------------------------------
# flow lines


@dataclass
class FlowPath:
    """RK4 path of ``x' = Y(x, t)``; ``points`` are unwrapped, ``wrapped`` lie in the cell."""

    times: np.ndarray
    points: np.ndarray
    velocities: np.ndarray
    periods: np.ndarray

    @property
    def wrapped(self) -> np.ndarray:
        return np.mod(self.points, self.periods)

    def position(self, t: float) -> np.ndarray:
        """Cubic Hermite interpolation between samples (exact at samples)."""
        times = self.times
        if t <= times[0]:
            return self.points[0].copy()
        if t >= times[-1]:
            return self.points[-1].copy()
        j = int(np.searchsorted(times, t)) - 1
        h = times[j + 1] - times[j]
        s = (t - times[j]) / h
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return (h00 * self.points[j] + h10 * h * self.velocities[j]
                + h01 * self.points[j + 1] + h11 * h * self.velocities[j + 1])


def integrate_flow(velocity: Callable[[np.ndarray, float], np.ndarray], x0, t0: float, t1: float,
                   dt: float, periods=None) -> FlowPath:
    """Classical RK4 for ``x' = velocity(x, t)`` with a uniform step not exceeding ``dt``.

    The velocity is evaluated at positions wrapped into the periodic cell; the
    returned path is unwrapped so it can be differenced.
    """
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    periods = np.full(x.shape, np.inf) if periods is None else np.broadcast_to(
        np.asarray(periods, dtype=float), x.shape).copy()

    def wrap(p):
        return np.where(np.isfinite(periods), np.mod(p, periods), p)

    def f(p, t):
        v = np.asarray(velocity(wrap(p), t), dtype=float)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite velocity at t={t:.6g}")
        return v

    nsteps = max(1, int(np.ceil((t1 - t0) / dt - 1e-9)))
    h = (t1 - t0) / nsteps
    times = t0 + h * np.arange(nsteps + 1)
    points = np.empty((nsteps + 1, x.size))
    vels = np.empty_like(points)
    points[0] = x
    vels[0] = f(x, t0)
    for i in range(nsteps):
        t = times[i]
        k1 = vels[i]
        k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
        k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
        k4 = f(x + h * k3, times[i + 1])
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite position at t={times[i + 1]:.6g}")
        points[i + 1] = x
        vels[i + 1] = f(x, times[i + 1])
    return FlowPath(times, points, vels, periods)


def flow_from_snapshots(yfield: YField, x0, t0: float | None = None, t1: float | None = None,
                        snapshots_per_step: int = 2) -> FlowPath:
    """RK4 flow whose stages land exactly on snapshot times (step = 2 snapshot spacings)."""
    times = yfield.times
    t0 = times[0] if t0 is None else t0
    t1 = times[-1] if t1 is None else t1
    spacing = float(np.min(np.diff(times)))
    return integrate_flow(yfield, x0, t0, t1, snapshots_per_step * spacing, yfield.periods)


# ---------------------------------------------------------------------------
# parallel adapted frames


@dataclass
class FrameTrajectory:
    times: np.ndarray
    points: np.ndarray
    frames: np.ndarray
    S: np.ndarray
    S_direct: np.ndarray
    B: np.ndarray
    R: np.ndarray
    D: np.ndarray
    E: np.ndarray
    F: np.ndarray
    corrections: list[tuple[float, float]] = field(default_factory=list)

    @property
    def Ssy(self) -> np.ndarray:
        return 0.5 * (self.S + np.swapaxes(self.S, 1, 2))

    @property
    def Ssk(self) -> np.ndarray:
        return 0.5 * (self.S - np.swapaxes(self.S, 1, 2))

    @property
    def orthonormality_drift(self) -> np.ndarray:
        n = self.frames.shape[1]
        gram = np.einsum("kij,klj->kil", self.frames, self.frames)
        return np.abs(gram - np.eye(n)).max(axis=(1, 2))

    @property
    def determinants(self) -> np.ndarray:
        return np.linalg.det(self.frames)

    @property
    def two_way_S_residual(self) -> float:
        return float(np.abs(self.S - self.S_direct).max())


def transport_adapted_frame(path: FlowPath, yfield: YField, frame0=None) -> FrameTrajectory:
    """Propagate ``v_i' = sum_j S^Sk_ij v_j`` along ``path`` and sample the matrices of the identities.

    With ``S = V G V^T`` and ``V`` orthogonal the equation reads ``V' = V G^Sk``;
    it is integrated by RK4 on the path's steps. Whenever ``max|V V^T - I|``
    exceeds ``1e-10`` the frame is replaced by its polar factor and the size of
    that correction is logged. Samples are only taken at snapshot times.
    """
    n = yfield.n
    V = np.eye(n) if frame0 is None else np.array(frame0, dtype=float)
    if V.shape != (n, n) or np.abs(V @ V.T - np.eye(n)).max() > 1e-10:
        raise ValueError("initial frame must be an orthonormal n x n matrix")

    def gen(t: float) -> np.ndarray:
        x = np.mod(path.position(t), yfield.periods)
        k = yfield.snapshot_index(t)
        if k is None:
            raise ValueError(f"frame stage at t={t:.6g} is not a snapshot time")
        return _skew(yfield.local(x, k).G)

    corrections = []
    frames = [V.copy()]
    for i in range(len(path.times) - 1):
        t, h = path.times[i], path.times[i + 1] - path.times[i]
        g1, g2, g4 = gen(t), gen(t + 0.5 * h), gen(t + h)
        k1 = V @ g1
        k2 = (V + 0.5 * h * k1) @ g2
        k3 = (V + 0.5 * h * k2) @ g2
        k4 = (V + h * k3) @ g4
        V = V + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        drift = float(np.abs(V @ V.T - np.eye(n)).max())
        if drift > ORTHO_CORRECTION_THRESHOLD:
            u, _, wt = np.linalg.svd(V)
            polar = u @ wt
            size = float(np.abs(polar - V).max())
            corrections.append((float(path.times[i + 1]), size))
            log.debug("re-orthonormalised frame at t=%.6g (correction %.3g)", path.times[i + 1], size)
            V = polar
        frames.append(V.copy())
    frames = np.array(frames)

    S, S_direct, B, D, E, F = [], [], [], [], [], []
    for i, t in enumerate(path.times):
        k = yfield.snapshot_index(t)
        x = np.mod(path.points[i], yfield.periods)
        loc = yfield.local(x, k)
        Vi = frames[i]
        S.append(Vi @ loc.G @ Vi.T)
        S_direct.append(_directional_S(yfield, x, k, Vi))
        B.append(Vi @ loc.B @ Vi.T)
        D.append(Vi @ loc.D @ Vi.T)
        E.append(Vi @ loc.E @ Vi.T)
        F.append(Vi @ loc.F @ Vi.T)
    S = np.array(S)
    return FrameTrajectory(
        times=path.times.copy(), points=path.points.copy(), frames=frames, S=S,
        S_direct=np.array(S_direct), B=np.array(B), R=np.zeros_like(S), D=np.array(D),
        E=np.array(E), F=np.array(F), corrections=corrections,
    )


def _directional_S(yfield: YField, x: np.ndarray, k: int, V: np.ndarray,
                   step: float = DIRECTIONAL_STEP) -> np.ndarray:
    """``<nabla_{v_i} Y, v_j>`` from a fourth-order difference of ``Y`` along each ``v_i``."""
    rows = []
    for v in V:
        def Y(s):
            return yfield.velocity_at(x + s * v, k)
        dY = (8 * (Y(step) - Y(-step)) - (Y(2 * step) - Y(-2 * step))) / (12 * step)
        rows.append(V @ dY)
    return np.array(rows)


# ---------------------------------------------------------------------------
# residuals along a frame trajectory


@dataclass
class FrameResiduals:
    times: np.ndarray
    bochner: np.ndarray
    sy1: np.ndarray
    trace: np.ndarray

    @property
    def max_bochner(self) -> float:
        return float(np.max(self.bochner))


def frame_residual_matrices(ft: FrameTrajectory) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Residual matrices of the Bochner-type identity and of its expanded form.

    ``Sdot^Sy + Sy^2 + Sy Sk - Sk Sy + Sk^2 - B^Sy + R`` and
    ``Sdot^Sy + Sy^2 - Sk^2 - D^Sy - E - F + R`` at interior samples.
    """
    keep = _centred_triples(ft.times)
    Ssy, Ssk = ft.Ssy, ft.Ssk
    lemma, expanded = [], []
    for k in keep:
        Sdot = (Ssy[k + 1] - Ssy[k - 1]) / (ft.times[k + 1] - ft.times[k - 1])
        Sy, Sk = Ssy[k], Ssk[k]
        lemma.append(Sdot + Sy @ Sy + Sy @ Sk - Sk @ Sy + Sk @ Sk - _sym(ft.B[k]) + ft.R[k])
        expanded.append(Sdot + Sy @ Sy - Sk @ Sk - _sym(ft.D[k]) - ft.E[k] - ft.F[k] + ft.R[k])
    return np.array(lemma), np.array(expanded), keep


def bochner_residuals(ft: FrameTrajectory) -> FrameResiduals:
    lemma, expanded, keep = frame_residual_matrices(ft)
    return FrameResiduals(
        times=ft.times[keep],
        bochner=np.linalg.norm(lemma, axis=(1, 2)),
        sy1=np.linalg.norm(expanded, axis=(1, 2)),
        trace=np.abs(np.trace(lemma, axis1=1, axis2=2)),
    )


def bochner_residual(ft: FrameTrajectory) -> float:
    """Max Frobenius norm of the Bochner-type residual over interior samples."""
    return bochner_residuals(ft).max_bochner


def frames_csv(ft: FrameTrajectory, res: FrameResiduals, eqY: GridResidual | None = None) -> str:
    """Columns ``t, residual_bochner, residual_eqY, orthonormality_drift`` (blank where undefined)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "residual_bochner", "residual_eqY", "orthonormality_drift"])
    drift = ft.orthonormality_drift
    boch = {round(float(t), 12): float(r) for t, r in zip(res.times, res.bochner)}
    eq = {} if eqY is None else {round(float(t), 12): float(r) for t, r in zip(eqY.times, eqY.residuals)}
    for t, d in zip(ft.times, drift):
        key = round(float(t), 12)
        row = [repr(float(t))]
        row.append(repr(boch[key]) if key in boch else "")
        row.append(repr(eq[key]) if key in eq else "")
        row.append(repr(float(d)))
        w.writerow(row)
    return buf.getvalue()
