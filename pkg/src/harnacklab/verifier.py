"""Pointwise margins of the matrix, Kähler and scalar Harnack inequalities.

A margin is "left side minus right side" of an inequality; the verified
statement holds at a node when its margin is non-negative. Margins are only
evaluated where ``rho >= rel_floor * max(rho)``: below that level the
log-derivatives are dominated by round-off in ``rho`` and carry no information.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fields import DerivedFields, DriftSpec
from .geometry import CovariantOps
from .hypotheses import _j_conjugate, scalar_constants
from .numerics import LogDerivatives, kcoth, lambda_min
from .solver import Trajectory

DEFAULT_TOL = 1e-3
DEFAULT_REL_FLOOR = 1e-6


@dataclass
class MarginReport:
    id: str
    times: np.ndarray
    min_margin: np.ndarray
    argmin: np.ndarray
    tolerance: float
    evaluated_fraction: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def global_min(self) -> float:
        return float(np.min(self.min_margin))

    @property
    def global_argmin(self) -> tuple[float, list[float]]:
        i = int(np.argmin(self.min_margin))
        return float(self.times[i]), [float(c) for c in self.argmin[i]]

    @property
    def passed(self) -> bool:
        return self.global_min >= -self.tolerance

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        dim = self.argmin.shape[1]
        w.writerow(["t", "min_margin"] + [f"argmin_x{i}" for i in range(dim)])
        for t, m, x in zip(self.times, self.min_margin, self.argmin):
            w.writerow([repr(float(t)), repr(float(m))] + [repr(float(c)) for c in x])
        return buf.getvalue()

    def summary(self) -> dict:
        t, x = self.global_argmin
        return {
            "id": self.id,
            "global_min_margin": self.global_min,
            "argmin_t": t,
            "argmin_x": x,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "slices": len(self.times),
            "min_evaluated_fraction": float(np.min(self.evaluated_fraction)),
            **self.meta,
        }


def _margin_report(ident: str, traj: Trajectory, margin_fn: Callable[[np.ndarray, float, LogDerivatives], np.ndarray],
                   tol: float, rel_floor: float, t_min: float | None, meta: dict | None = None) -> MarginReport:
    grid = traj.grid
    ttimes = traj.theorem_times
    lower = 0.0 if t_min is None else t_min
    keep = [i for i, t in enumerate(ttimes) if t > 0 and t >= lower - 1e-12]
    if not keep:
        raise ValueError("no snapshot at a positive theorem time >= t_min")
    mins, where, frac = [], [], []
    for i in keep:
        rho = traj.snapshots[i]
        if rho.min() <= 0:
            raise ValueError(f"non-positive rho in snapshot at t={traj.times[i]}")
        ld = LogDerivatives(rho, grid)
        m = margin_fn(rho, float(ttimes[i]), ld)
        mask = rho >= rel_floor * rho.max()
        m = np.where(mask, m, np.inf)
        j = int(np.argmin(m))
        idx = np.unravel_index(j, grid.shape)
        mins.append(float(m.flat[j]))
        where.append(grid.node(idx))
        frac.append(float(mask.mean()))
    return MarginReport(
        id=ident,
        times=ttimes[keep],
        min_margin=np.array(mins),
        argmin=np.array(where),
        tolerance=tol,
        evaluated_fraction=np.array(frac),
        meta={"rel_floor": rel_floor, **(meta or {})},
    )


def matrix_margin(traj: Trajectory, derived: DerivedFields, k: float, tol: float = DEFAULT_TOL,
                  rel_floor: float = DEFAULT_REL_FLOOR, t_min: float | None = None,
                  override: bool = False) -> MarginReport:
    """``lambda_min(Hess log rho + (grad X + grad X^*)/4) + k coth(k t) / 2``."""
    quarter = 0.25 * derived.symX

    def fn(rho, t, ld):
        return lambda_min(ld.hessian() + quarter) + 0.5 * kcoth(k, t)

    return _margin_report("matrix", traj, fn, tol, rel_floor, t_min,
                          {"k": k, "hypothesis_override": override})


def kahler_margin(traj: Trajectory, derived: DerivedFields, J: np.ndarray | None, k: float,
                  tol: float = DEFAULT_TOL, rel_floor: float = DEFAULT_REL_FLOOR,
                  t_min: float | None = None, override: bool = False) -> MarginReport:
    """``lambda_min(H + J*HJ + (M + J*MJ)/4) + k coth(k t)`` with ``M = grad X + grad X^*``."""
    if J is None:
        from .geometry import NoComplexStructure
        raise NoComplexStructure("Kähler margin needs a complex structure")
    M = derived.symX
    quarter = 0.25 * (M + _j_conjugate(M, J))

    def fn(rho, t, ld):
        H = ld.hessian()
        return lambda_min(H + _j_conjugate(H, J) + quarter) + kcoth(k, t)

    return _margin_report("kahler", traj, fn, tol, rel_floor, t_min,
                          {"k": k, "hypothesis_override": override})


# ---------------------------------------------------------------------------
# scalar inequality


@dataclass(frozen=True)
class HarnackParams:
    k: float = 0.0
    K: float = 0.0
    lam: float = 0.0
    k1: float = 0.0
    k2: float = 0.0
    n: int = 1

    def __post_init__(self):
        for name in ("k", "K", "lam", "k1", "k2"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
        if self.k < 0 or self.K < 0 or self.lam < 0 or self.k2 < 0:
            raise ValueError("k, K, lambda and k2 must be non-negative")
        if self.chi_squared < 0:
            raise ValueError("(K+lambda)^2 + (k1 + 2(K+lambda)k2)/n is negative; raise k1")

    @property
    def N(self) -> float:
        return self.K + self.lam

    @property
    def chi_squared(self) -> float:
        return self.N**2 + (self.k1 + 2 * self.N * self.k2) / self.n

    @property
    def chi(self) -> float:
        return math.sqrt(max(0.0, self.chi_squared))

    def to_dict(self) -> dict:
        return {"k": self.k, "K": self.K, "lambda": self.lam, "k1": self.k1, "k2": self.k2,
                "n": self.n, "chi": self.chi}


def _sinhc_minus_one(u: float) -> float:
    """``sinh(u)/u - 1`` without cancellation."""
    if abs(u) < 0.1:
        u2 = u * u
        return u2 / 6 + u2**2 / 120 + u2**3 / 5040 + u2**4 / 362880
    return math.sinh(u) / u - 1.0


def abc_parameters(params: HarnackParams, t: float) -> tuple[float, float, float]:
    """``(a(t), b(t), c(t))`` of the scalar inequality."""
    if t < 0:
        raise ValueError("t must be non-negative")
    chi = params.chi
    if chi == 0:
        raise ValueError("chi = 0: all parameters vanish; use li_yau_margin instead")
    N, n = params.N, params.n
    x = chi * t
    s, c = math.sinh(x), math.cosh(x)
    # sinh(x)cosh(x)/chi - t = t (sinh(2x)/(2x) - 1)
    q = t * _sinhc_minus_one(2 * x)
    a = s * s + N * q
    b = -N * q
    cc = n * s * (N * s + chi * c)
    return a, b, cc


def a_dot(params: HarnackParams, t: float) -> float:
    chi, N = params.chi, params.N
    x = chi * t
    return chi * math.sinh(2 * x) + 2 * N * math.sinh(x) ** 2


def c_proof(params: HarnackParams, t: float) -> float:
    """The proof's ``c``, defined by ``a' = 2 c (a + b) / n``."""
    a, b, _ = abc_parameters(params, t)
    return params.n * a_dot(params, t) / (2 * (a + b))


def li_xu_abc(K: float, t: float, n: int) -> tuple[float, float, float]:
    """Closed forms of the heat-equation case ``X = 0, U = 0`` with Ricci bound ``-K``."""
    e = math.exp(K * t)
    s, c = math.sinh(K * t), math.cosh(K * t)
    return e * s - K * t, -s * c + K * t, n * K * e * s


def scalar_margin(traj: Trajectory, derived: DerivedFields, params: HarnackParams,
                  tol: float = DEFAULT_TOL, rel_floor: float = DEFAULT_REL_FLOOR,
                  t_min: float | None = None, ident: str = "scalar") -> MarginReport:
    """``a(L + div X/2) - b |grad log rho + X/2|^2 + b W/2 + c/2`` with ``L = Laplace log rho``."""
    if params.chi == 0:
        raise ValueError("chi = 0: the scalar inequality is vacuous; use li_yau_margin")
    X = derived.spec.X
    half_div = 0.5 * derived.divX
    W = derived.W

    def fn(rho, t, ld):
        a, b, c = abc_parameters(params, t)
        g = ld.gradient() + 0.5 * X
        return a * (ld.laplacian() + half_div) - b * np.sum(g * g, axis=0) + 0.5 * b * W + 0.5 * c

    meta = {"params": params.to_dict(),
            "note": "statement form; the proof quantity is g = -2 * (statement LHS)"}
    return _margin_report(ident, traj, fn, tol, rel_floor, t_min, meta)


def li_xu_margin(traj: Trajectory, spec: DriftSpec, derived: DerivedFields, K: float,
                 tol: float = DEFAULT_TOL, rel_floor: float = DEFAULT_REL_FLOOR,
                 t_min: float | None = None) -> MarginReport:
    if not spec.is_trivial:
        raise ValueError("the Li-Xu inequality needs X = 0 and U = 0")
    if K <= 0:
        raise ValueError("Li-Xu mode needs K > 0")
    params = HarnackParams(K=K, n=traj.grid.dim)
    return scalar_margin(traj, derived, params, tol, rel_floor, t_min, ident="li_xu")


def li_yau_margin(traj: Trajectory, spec: DriftSpec | None = None, tol: float = DEFAULT_TOL,
                  rel_floor: float = DEFAULT_REL_FLOOR, t_min: float | None = None) -> MarginReport:
    """``Laplace log rho + n / (2t)``."""
    if spec is not None and not spec.is_trivial:
        raise ValueError("li_yau_margin needs X = 0 and U = 0")
    n = traj.grid.dim

    def fn(rho, t, ld):
        return ld.laplacian() + n / (2 * t)

    return _margin_report("li_yau", traj, fn, tol, rel_floor, t_min)


def gradient_case_reduction_check(derived: DerivedFields) -> float:
    """Max deviation between ``(grad X + grad X^*)/4`` and ``Hess f / 2`` for ``X = grad f``."""
    f = derived.spec.potential_f
    if f is None:
        raise ValueError("drift is not a known gradient field")
    hess_f = CovariantOps(derived.spec.model).hessian(f)
    return float(np.abs(0.25 * derived.symX - 0.5 * hess_f).max())


def optimize_lambda(derived: DerivedFields, t: float, bounds: tuple[float, float] = (1e-3, 10.0),
                    xtol: float = 1e-3) -> float:
    """Coarse golden-section search for the ``lambda`` minimising ``c(t)``."""
    n = derived.dim

    def bound_at(lam):
        K, k1, k2 = scalar_constants(derived, lam)
        p = HarnackParams(K=K, lam=lam, k1=max(k1, 0.0), k2=k2, n=n)
        return abc_parameters(p, t)[2] if p.chi > 0 else 0.0

    lo, hi = bounds
    phi = (math.sqrt(5) - 1) / 2
    x1, x2 = hi - phi * (hi - lo), lo + phi * (hi - lo)
    f1, f2 = bound_at(x1), bound_at(x2)
    while hi - lo > xtol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - phi * (hi - lo)
            f1 = bound_at(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + phi * (hi - lo)
            f2 = bound_at(x2)
    return 0.5 * (lo + hi)
