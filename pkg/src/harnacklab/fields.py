"""Drift and potential fields and every tensor derived from them.

Built-in fields are analytic trigonometric expressions sampled once on the model
grid; all derivatives after that are discrete (spectral, with the model's
connection corrections).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from . import numerics
from .geometry import CovariantOps, ManifoldModel


@dataclass(frozen=True)
class TrigTerm:
    """``amp * sin(wave . x + phase)`` or the cosine variant."""

    amp: float
    wave: tuple[float, ...]
    kind: str = "sin"
    phase: float = 0.0

    def _arg(self, coords: np.ndarray) -> np.ndarray:
        wave = np.asarray(self.wave, dtype=float)
        return np.tensordot(wave, coords, axes=(0, 0)) + self.phase

    def value(self, coords: np.ndarray) -> np.ndarray:
        fn = np.sin if self.kind == "sin" else np.cos
        return self.amp * fn(self._arg(coords))

    def gradient(self, coords: np.ndarray) -> np.ndarray:
        arg = self._arg(coords)
        d = np.cos(arg) if self.kind == "sin" else -np.sin(arg)
        return np.array([self.amp * w * d for w in self.wave])

    @classmethod
    def parse(cls, spec: Mapping[str, Any], dim: int) -> "TrigTerm":
        kind = spec.get("kind", "sin")
        if kind not in ("sin", "cos"):
            raise ValueError(f"trig term kind must be 'sin' or 'cos', got {kind!r}")
        wave = tuple(float(w) for w in spec["wave"])
        if len(wave) != dim:
            raise ValueError(f"wave vector {wave} does not match dimension {dim}")
        return cls(float(spec["amp"]), wave, kind, float(spec.get("phase", 0.0)))


def sample_terms(terms: Sequence[TrigTerm], coords: np.ndarray, constant: float = 0.0) -> np.ndarray:
    out = np.full(coords.shape[1:], float(constant))
    for term in terms:
        out = out + term.value(coords)
    return out


@dataclass
class DriftSpec:
    """Drift ``X`` (orthonormal-frame components) and potential ``U`` on a grid model.

    ``potential_f`` is set when ``X`` is known to be the gradient of ``f``.
    """

    model: ManifoldModel
    X: np.ndarray
    U: np.ndarray
    potential_f: np.ndarray | None = None
    label: str = ""

    def __post_init__(self):
        grid = self.model.require_grid()
        self.X = np.asarray(self.X, dtype=float)
        self.U = np.asarray(self.U, dtype=float)
        if self.X.shape != (self.model.dim,) + grid.shape:
            raise ValueError(f"X must have shape {(self.model.dim,) + grid.shape}, got {self.X.shape}")
        if self.U.shape != grid.shape:
            raise ValueError(f"U must have shape {grid.shape}, got {self.U.shape}")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.U))):
            raise ValueError("drift and potential must be finite")

    @property
    def grid(self):
        return self.model.grid

    @property
    def is_zero_drift(self) -> bool:
        return not np.any(self.X)

    @property
    def is_trivial(self) -> bool:
        return self.is_zero_drift and not np.any(self.U)

    def scaled(self, c: float) -> "DriftSpec":
        f = None if self.potential_f is None else c * self.potential_f
        return DriftSpec(self.model, c * self.X, c * self.U, f, self.label)


@dataclass
class DerivedFields:
    """Tensors built from ``(X, U)``; matrices use ``M[a, b] = <M(e_a), e_b>``."""

    gradX: np.ndarray
    A: np.ndarray
    symX: np.ndarray
    divX: np.ndarray
    W: np.ndarray
    gradW: np.ndarray
    hessW: np.ndarray
    lapW: np.ndarray
    divA: np.ndarray
    normA2: np.ndarray
    gradA: np.ndarray
    spec: DriftSpec

    @property
    def dim(self) -> int:
        return self.spec.model.dim


def derive(spec: DriftSpec) -> DerivedFields:
    ops = CovariantOps(spec.model)
    gradX = ops.covariant_derivative(spec.X)
    A = gradX - np.swapaxes(gradX, 0, 1)
    symX = gradX + np.swapaxes(gradX, 0, 1)
    divX = np.trace(gradX)
    W = divX + 0.5 * np.sum(spec.X**2, axis=0) - 2.0 * spec.U
    return DerivedFields(
        gradX=gradX,
        A=A,
        symX=symX,
        divX=divX,
        W=W,
        gradW=ops.gradient(W),
        hessW=ops.hessian(W),
        lapW=ops.laplacian(W),
        divA=ops.tensor_divergence(A),
        normA2=np.sum(A**2, axis=(0, 1)),
        gradA=ops.tensor_derivative(A),
        spec=spec,
    )


def independent_divergence(spec: DriftSpec) -> np.ndarray:
    """Divergence through the volume density, ``s^n sum_i d_i(s^{1-n} X_i)``.

    ``s`` is the frame scale of the (conformally flat) model; this path shares no
    code with the connection-based covariant derivative.
    """
    grid = spec.grid
    n = spec.model.dim
    s = spec.model.frame_scale()
    total = sum(numerics.spectral_derivative(s ** (1 - n) * spec.X[i], grid, i, 1) for i in range(n))
    return s**n * total


def w_precision_check(spec: DriftSpec, derived: DerivedFields | None = None) -> float:
    """Max deviation between ``W`` from :func:`derive` and an independent recomputation."""
    derived = derive(spec) if derived is None else derived
    W_ref = independent_divergence(spec) + 0.5 * np.einsum("i...,i...->...", spec.X, spec.X) - 2.0 * spec.U
    return float(np.abs(derived.W - W_ref).max())


# ---------------------------------------------------------------------------
# built-in drifts and potentials


def _terms(params: Mapping[str, Any], key: str, dim: int) -> list[TrigTerm]:
    return [TrigTerm.parse(t, dim) for t in params.get(key, [])]


def _need_2d(model: ManifoldModel, name: str):
    if model.dim != 2:
        raise ValueError(f"drift {name!r} is defined on 2-dimensional models only")


def build_drift(model: ManifoldModel, name: str, params: Mapping[str, Any] | None = None):
    """Sample a named drift; returns ``(X, f)`` with ``f`` the gradient potential or ``None``."""
    params = dict(params or {})
    grid = model.require_grid()
    coords = grid.coords
    n = model.dim
    s = model.frame_scale()
    if name == "zero":
        return np.zeros((n,) + grid.shape), np.zeros(grid.shape)
    if name == "constant":
        vec = np.asarray(params.get("vector", [0.0] * n), dtype=float)
        if vec.shape != (n,):
            raise ValueError(f"constant drift vector must have {n} components")
        return np.einsum("i,...->i...", vec, np.ones(grid.shape)), None
    if name in ("gradient_sine", "gradient"):
        if name == "gradient_sine":
            wave = params.get("wave", [1.0] + [0.0] * (n - 1))
            terms = [TrigTerm(float(params.get("amplitude", 0.3)), tuple(float(w) for w in wave),
                              params.get("kind", "sin"), float(params.get("phase", 0.0)))]
            if len(terms[0].wave) != n:
                raise ValueError("wave vector does not match the dimension")
        else:
            terms = _terms(params, "terms", n)
        f = sample_terms(terms, coords)
        grad = sum((t.gradient(coords) for t in terms), np.zeros((n,) + grid.shape))
        return s * grad, f
    if name == "cross_sine":
        _need_2d(model, name)
        a = float(params.get("amplitude", 0.5))
        x, y = coords
        return np.array([a * np.sin(y), a * np.sin(x)]), None
    if name == "shear_sine":
        _need_2d(model, name)
        a = float(params.get("amplitude", 1.0))
        x, y = coords
        return np.array([a * np.sin(y), np.zeros_like(x)]), None
    if name == "vector_terms":
        comps = params.get("components")
        if not isinstance(comps, list) or len(comps) != n:
            raise ValueError(f"vector_terms needs {n} component term lists")
        X = np.array([sample_terms([TrigTerm.parse(t, n) for t in comp], coords) for comp in comps])
        return X, None
    raise ValueError(f"unknown drift {name!r}")


def build_potential(model: ManifoldModel, name: str, params: Mapping[str, Any] | None,
                    X: np.ndarray) -> np.ndarray:
    params = dict(params or {})
    grid = model.require_grid()
    coords = grid.coords
    n = model.dim
    if name == "zero":
        return np.zeros(grid.shape)
    if name == "constant":
        return np.full(grid.shape, float(params.get("value", 0.0)))
    if name == "cosine":
        wave = tuple(float(w) for w in params.get("wave", [1.0] + [0.0] * (n - 1)))
        if len(wave) != n:
            raise ValueError("wave vector does not match the dimension")
        term = TrigTerm(float(params.get("amplitude", 1.0)), wave, "cos", float(params.get("phase", 0.0)))
        return sample_terms([term], coords, params.get("offset", 0.0))
    if name == "terms":
        return sample_terms(_terms(params, "terms", n), coords, params.get("offset", 0.0))
    if name == "divergence_of_drift":
        return CovariantOps(model).divergence(X)
    raise ValueError(f"unknown potential {name!r}")


DRIFTS = ("zero", "constant", "gradient_sine", "gradient", "cross_sine", "shear_sine", "vector_terms")
POTENTIALS = ("zero", "constant", "cosine", "terms", "divergence_of_drift")


def make_drift_spec(model: ManifoldModel, drift: Mapping[str, Any] | None,
                    potential: Mapping[str, Any] | None) -> DriftSpec:
    drift = dict(drift or {"name": "zero"})
    potential = dict(potential or {"name": "zero"})
    X, f = build_drift(model, drift.get("name", "zero"), drift)
    U = build_potential(model, potential.get("name", "zero"), potential, X)
    label = f"{drift.get('name', 'zero')}/{potential.get('name', 'zero')}"
    return DriftSpec(model, X, U, f, label)
