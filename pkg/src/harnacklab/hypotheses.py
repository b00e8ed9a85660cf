"""Smallest admissible constants for the Harnack theorems, read off grid suprema."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry
from .fields import DerivedFields
from .geometry import CovariantOps, ManifoldModel
from .numerics import lambda_max, lambda_min

FLAG_TOL = 1e-8
DIV_A_ZERO_TOL = 1e-9
REFINEMENT_RTOL = 1e-3


def _sup_lambda_max(matrix_field: np.ndarray) -> float:
    return float(np.max(lambda_max(matrix_field)))


def _A_squared(A: np.ndarray) -> np.ndarray:
    return np.einsum("ac...,cb...->ab...", A, A)


def _j_conjugate(M: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Matrix of the form ``(v, w) -> M(Jv, Jw)``, i.e. ``J M J^T``."""
    return np.einsum("ia,ab...,jb->ij...", J, M, J)


def best_k(derived: DerivedFields) -> float:
    """``k = sqrt(max(0, sup lambda_max(A^2/4 + Hess W)))``."""
    M = 0.25 * _A_squared(derived.A) + derived.hessW
    return math.sqrt(max(0.0, _sup_lambda_max(M)))


def best_k_kahler(derived: DerivedFields, J: np.ndarray | None) -> float:
    if J is None:
        raise geometry.NoComplexStructure("Kähler constant needs a complex structure")
    H = derived.hessW
    M = 0.25 * _A_squared(derived.A) + 0.5 * (H + _j_conjugate(H, J))
    return math.sqrt(max(0.0, _sup_lambda_max(M)))


def sample_unit_vectors(dim: int, count: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(count, dim))
    v = np.vstack([np.eye(dim), v])
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def kahler_A_conditions(derived: DerivedFields, J: np.ndarray | None, samples: int = 16,
                        seed: int = 0) -> tuple[float, float]:
    """Residuals of ``J* A J = A`` and of ``nabla A(v, v) + nabla A(Jv, Jv) = 0``."""
    if J is None:
        raise geometry.NoComplexStructure("Kähler conditions need a complex structure")
    A = derived.A
    sym = float(np.abs(_j_conjugate(A, J) - A).max())
    vs = sample_unit_vectors(derived.dim, samples, seed)
    ws = sample_unit_vectors(derived.dim, samples, seed + 1)
    gA = derived.gradA
    worst = 0.0
    for v in vs:
        Jv = v @ J
        vec = np.einsum("c,a,cab...->b...", v, v, gA) + np.einsum("c,a,cab...->b...", Jv, Jv, gA)
        proj = np.einsum("wb,b...->w...", ws, vec)
        worst = max(worst, float(np.abs(proj).max()))
    return sym, worst


def ricci_lower_bound(model: ManifoldModel) -> float:
    """``K = max(0, -min lambda_min(Rc))`` over the grid (or 0 where the model is flat)."""
    Rc = geometry.ricci_field(model)
    return max(0.0, -float(np.min(lambda_min(Rc))))


def scalar_constants(derived: DerivedFields, lam: float, model: ManifoldModel | None = None
                     ) -> tuple[float, float, float]:
    """``(K, k1, k2)`` for the scalar inequality at a given ``lambda``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    model = derived.spec.model if model is None else model
    K = ricci_lower_bound(model)
    divA2 = np.sum(derived.divA**2, axis=0)
    expr = -0.25 * derived.normA2 + derived.lapW
    if lam == 0:
        if np.sqrt(divA2.max()) > DIV_A_ZERO_TOL:
            raise ValueError("lambda = 0 requires div A = 0 (the 1/(4 lambda) term is undefined)")
    else:
        expr = expr + divA2 / (4.0 * lam)
    k1 = float(expr.max())
    k2 = max(0.0, -float(derived.W.min()))
    return K, k1, k2


@dataclass
class MatrixFlags:
    sectional_negativity: float
    ricci_parallel_residual: float
    A_parallel_residual: float
    tol: float = FLAG_TOL

    @property
    def sectional_ok(self) -> bool:
        return self.sectional_negativity <= self.tol

    @property
    def ricci_ok(self) -> bool:
        return self.ricci_parallel_residual <= self.tol

    @property
    def A_ok(self) -> bool:
        return self.A_parallel_residual <= self.tol

    @property
    def all_ok(self) -> bool:
        return self.sectional_ok and self.ricci_ok and self.A_ok


def matrix_hypothesis_flags(model: ManifoldModel, derived: DerivedFields) -> MatrixFlags:
    sectional = geometry.sectional_curvature_field(model)
    Rc = geometry.ricci_field(model)
    nabla_Rc = CovariantOps(model).tensor_derivative(Rc)
    return MatrixFlags(
        sectional_negativity=max(0.0, -float(sectional.min())),
        ricci_parallel_residual=float(np.abs(nabla_Rc).max()),
        A_parallel_residual=float(np.abs(derived.gradA).max()),
    )


def bisectional_min(model: ManifoldModel) -> float:
    # flat tori and surfaces: bisectional curvature of unit vectors equals the Gauss curvature
    return float(geometry.sectional_curvature_field(model).min())


@dataclass
class HypothesisReport:
    sectional_min: float
    ricci_parallel_residual: float
    A_parallel_residual: float
    k: float
    K: float
    lam: float | None
    k1: float | None
    k2: float | None
    kahler_A_sym_residual: float | None
    kahler_gradA_residual: float | None
    k_kahler: float | None
    bisectional_min: float | None
    flags: dict[str, bool] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def extract(model: ManifoldModel, derived: DerivedFields, lam: float | None) -> HypothesisReport:
    """All hypothesis flags and constants; ``lam=None`` skips ``k1`` and ``k2``."""
    mf = matrix_hypothesis_flags(model, derived)
    sectional_min = float(geometry.sectional_curvature_field(model).min())
    if lam is None:
        K, k1, k2 = ricci_lower_bound(model), None, None
    else:
        K, k1, k2 = scalar_constants(derived, lam, model)
    flags = {
        "sectional_nonnegative": mf.sectional_ok,
        "ricci_parallel": mf.ricci_ok,
        "A_parallel": mf.A_ok,
        "matrix_theorem": mf.all_ok,
    }
    kahler = dict(kahler_A_sym_residual=None, kahler_gradA_residual=None, k_kahler=None,
                  bisectional_min=None)
    if model.has_complex_structure:
        sym, grad = kahler_A_conditions(derived, model.J)
        bis = bisectional_min(model)
        kahler = dict(kahler_A_sym_residual=sym, kahler_gradA_residual=grad,
                      k_kahler=best_k_kahler(derived, model.J), bisectional_min=bis)
        flags.update({
            "bisectional_nonnegative": bis >= -FLAG_TOL,
            "kahler_A_symmetric": sym <= FLAG_TOL,
            "kahler_gradA": grad <= FLAG_TOL,
        })
        flags["kahler_theorem"] = (flags["bisectional_nonnegative"] and flags["kahler_A_symmetric"]
                                   and flags["kahler_gradA"])
    return HypothesisReport(
        sectional_min=sectional_min,
        ricci_parallel_residual=mf.ricci_parallel_residual,
        A_parallel_residual=mf.A_parallel_residual,
        k=best_k(derived),
        K=K, lam=None if lam is None else float(lam), k1=k1, k2=k2,
        flags=flags,
        **kahler,
    )


CONSTANT_KEYS = ("k", "K", "k1", "k2", "k_kahler")


def refinement_check(coarse: HypothesisReport, fine: HypothesisReport,
                     rtol: float = REFINEMENT_RTOL) -> dict:
    """Compare constants extracted at ``m`` and ``2m`` points per axis."""
    diffs = {}
    ok = True
    for key in CONSTANT_KEYS:
        a, b = getattr(coarse, key), getattr(fine, key)
        if a is None or b is None:
            continue
        diff = abs(a - b)
        diffs[key] = diff
        ok = ok and diff <= rtol * max(1.0, abs(b))
    return {"differences": diffs, "rtol": rtol, "pass": ok}
