import dataclasses
import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from harnacklab import fields, geometry as geo, hypotheses as hyp

XS, YS = sp.symbols("x y")


def torus(m=32, dim=2):
    return geo.FlatTorus(dim, 2 * math.pi, m)


def derived(model, drift=None, potential=None):
    return fields.derive(fields.make_drift_spec(model, drift, potential))


def test_trivial_constants():
    model = torus(16)
    d = derived(model)
    assert hyp.best_k(d) == 0
    assert hyp.best_k_kahler(d, model.J) == 0
    assert hyp.scalar_constants(d, 0.0) == (0.0, 0.0, 0.0)
    assert hyp.kahler_A_conditions(d, model.J) == (0.0, 0.0)
    flags = hyp.matrix_hypothesis_flags(model, d)
    assert flags.all_ok


def test_best_k_one_dimensional():
    model = torus(64, dim=1)
    d = derived(model, None, {"name": "cosine", "amplitude": -0.5})
    assert hyp.best_k(d) == pytest.approx(1.0, abs=1e-12)


def test_best_k_kahler_averages_over_J():
    model = torus(64)
    d = derived(model, None, {"name": "cosine", "amplitude": -0.5})
    assert hyp.best_k(d) == pytest.approx(1.0, abs=1e-12)
    assert hyp.best_k_kahler(d, model.J) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    with pytest.raises(geo.NoComplexStructure):
        hyp.best_k_kahler(d, None)


def test_kahler_equals_best_k_for_J_invariant_hessian():
    model = torus(64)
    d = derived(model, None, {"name": "terms", "terms": [
        {"amp": 0.3, "wave": [1, 0], "kind": "cos"}, {"amp": 0.3, "wave": [0, 1], "kind": "cos"}]})
    # Hess W = 0.6 diag(cos x, cos y) is not J-invariant everywhere, but at x = y = 0 both agree
    assert hyp.best_k_kahler(d, model.J) == pytest.approx(hyp.best_k(d), abs=1e-12)


def test_adding_constant_to_U_leaves_k():
    model = torus(32)
    a = derived(model, {"name": "gradient_sine", "wave": [1, 1]}, {"name": "cosine", "amplitude": 0.2})
    b = derived(model, {"name": "gradient_sine", "wave": [1, 1]},
                {"name": "cosine", "amplitude": 0.2, "offset": 3.0})
    assert hyp.best_k(a) == pytest.approx(hyp.best_k(b), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2), st.floats(0, 2))
def test_best_k_monotone_in_potential(a, eps):
    """U = a cos x on T^1 gives sup W'' = 2a; adding eps cos x cannot lower k."""
    model = torus(32, dim=1)
    k0 = hyp.best_k(derived(model, None, {"name": "cosine", "amplitude": a}))
    k1 = hyp.best_k(derived(model, None, {"name": "cosine", "amplitude": a + eps}))
    assert k1 >= k0 - 1e-12
    assert k0 == pytest.approx(math.sqrt(2 * a), abs=1e-9)


def test_kahler_A_symmetry_is_automatic_in_2d():
    model = torus(32)
    d = derived(model, {"name": "cross_sine"})
    sym, _ = hyp.kahler_A_conditions(d, model.J)
    assert sym <= 1e-12


def test_kahler_gradA_residual_against_symbolic_oracle():
    """X = (0, sin x): A = cos x * [[0, 1], [-1, 0]]."""
    model = torus(32)
    d = derived(model, {"name": "vector_terms", "components": [[], [{"amp": 1.0, "wave": [1, 0]}]]})
    a = sp.cos(XS)
    da = [sp.diff(a, XS), sp.diff(a, YS)]
    R = np.array([[0.0, 1.0], [-1.0, 0.0]])
    J = model.J
    vs = hyp.sample_unit_vectors(2, 16, 0)
    ws = hyp.sample_unit_vectors(2, 16, 1)
    grad_a = np.array([sp.lambdify((XS, YS), e, "numpy")(*model.grid.coords) + np.zeros(model.grid.shape)
                       for e in da])
    worst = 0.0
    for v in vs:
        Jv = v @ J
        # (nabla_v A)(v, .) + (nabla_Jv A)(Jv, .), with A(u, .) = a * (u R)
        vec = (np.einsum("c,c...->...", v, grad_a)[None] * (v @ R)[:, None, None]
               + np.einsum("c,c...->...", Jv, grad_a)[None] * (Jv @ R)[:, None, None])
        worst = max(worst, float(np.abs(np.einsum("wb,b...->w...", ws, vec)).max()))
    _, got = hyp.kahler_A_conditions(d, J)
    assert got == pytest.approx(worst, abs=1e-12)
    assert got > 0.1


def test_scalar_constants_against_symbolic_oracle():
    model = torus(64)
    d = derived(model, {"name": "cross_sine", "amplitude": 1.0})
    X = [sp.sin(YS), sp.sin(XS)]
    c = (XS, YS)
    A = [[sp.diff(X[b], c[a]) - sp.diff(X[a], c[b]) for b in range(2)] for a in range(2)]
    divA = [sum(sp.diff(A[a][b], c[a]) for a in range(2)) for b in range(2)]
    W = sum(sp.diff(X[i], c[i]) for i in range(2)) + (X[0] ** 2 + X[1] ** 2) / 2
    lam = sp.Rational(1, 2)
    expr = (divA[0] ** 2 + divA[1] ** 2) / (4 * lam) - sum(A[a][b] ** 2 for a in range(2) for b in range(2)) / 4 \
        + sp.diff(W, XS, 2) + sp.diff(W, YS, 2)
    vals = sp.lambdify((XS, YS), expr, "numpy")(*model.grid.coords)
    K, k1, k2 = hyp.scalar_constants(d, 0.5)
    assert K == 0
    assert k1 == pytest.approx(float(vals.max()), abs=1e-10)
    assert k2 == 0.0
    with pytest.raises(ValueError):
        hyp.scalar_constants(d, 0.0)
    with pytest.raises(ValueError):
        hyp.scalar_constants(d, -1.0)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.01, 10))
def test_scalar_constants_lambda_independent_without_curl(lam):
    model = torus(32)
    d = derived(model, {"name": "gradient_sine", "wave": [1, 2]}, {"name": "cosine", "amplitude": 0.3})
    assert hyp.scalar_constants(d, lam) == hyp.scalar_constants(d, 0.0)


def test_k2_from_negative_W():
    model = torus(32, dim=1)
    d = derived(model, None, {"name": "constant", "value": 0.75})
    assert hyp.scalar_constants(d, 1.0)[2] == pytest.approx(1.5)


def test_sphere_ricci_constant():
    """Pointwise Rc = g / r^2 on the round sphere, so K = max(0, -min lambda(Rc)) = 0."""
    for r in (0.5, 2.0, 3.0):
        for p in ([1.0, 0.5], [2.5, 4.0]):
            Rc = geo.curvature(geo.Sphere2(r), p).Rc
            assert np.allclose(Rc, np.eye(2) / r**2, atol=1e-12)
            assert max(0.0, -np.linalg.eigvalsh(Rc).min()) == 0.0


def test_matrix_flags():
    model = torus(32)
    assert hyp.matrix_hypothesis_flags(model, derived(model, {"name": "gradient_sine"})).all_ok
    shear = hyp.matrix_hypothesis_flags(model, derived(model, {"name": "shear_sine"}))
    assert not shear.A_ok and shear.sectional_ok and shear.ricci_ok
    assert shear.A_parallel_residual == pytest.approx(1.0, abs=1e-10)


def test_conformal_fails_sectional_flag():
    flat = torus(32)
    model = geo.ConformalTorus(flat.grid, 0.2 * np.sin(flat.grid.coords[0]))
    d = derived(model)
    rep = hyp.extract(model, d, 1.0)
    assert not rep.flags["sectional_nonnegative"]
    assert not rep.flags["matrix_theorem"]
    assert rep.K > 0
    assert rep.sectional_min < 0


def test_extract_report_and_refinement():
    def report(m):
        model = torus(m)
        return hyp.extract(model, derived(model, {"name": "cross_sine"}, {"name": "cosine", "amplitude": 0.3}), 0.5)
    coarse, fine = report(32), report(64)
    assert coarse.flags["kahler_A_symmetric"]
    assert not coarse.flags["A_parallel"]
    assert coarse.to_dict()["lambda"] == 0.5
    check = hyp.refinement_check(coarse, fine)
    assert check["pass"]
    assert max(check["differences"].values()) < 1e-10
    bad = hyp.refinement_check(dataclasses.replace(coarse, k=coarse.k + 0.1), fine)
    assert not bad["pass"]
