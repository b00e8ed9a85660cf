"""Scenario-driven command line front end.

A scenario is a single JSON document (see ``list-scenarios`` for the built-in
library). ``run`` solves the PDE, evaluates the selected checks and writes a
deterministic ``summary.json`` plus CSV tables. Exit codes: 0 all checks pass,
1 some check fails, 2 configuration error, 3 solver abort.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import frames as fr
from . import geometry as geo
from . import hypotheses as hy
from . import verifier as ver
from .fields import DRIFTS, POTENTIALS, derive, make_drift_spec, w_precision_check
from .numerics import Grid, LogDerivatives
from .solver import (SolverAbort, fd_solve, heat_kernel_seed, mass_balance_check, solve,
                     stability_bound)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
DEFAULT_T_MIN = 0.05
SEED_FLOOR = 1e-10
MARGIN_CHECKS = ("matrix", "kahler", "scalar", "li_yau", "li_xu")
CHECKS = MARGIN_CHECKS + ("frames", "geometry", "mass_balance", "fd_oracle")
INITIAL_KINDS = ("constant", "single_mode", "heat_kernel_seed", "custom")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# ---------------------------------------------------------------------------
# built-in scenarios

_T2_SMOOTH_INITIAL = {"kind": "single_mode", "offset": 1.5, "amplitude": 1.0, "wave": [1, 1]}
_T2_2PI = {"variant": "flat_torus", "dim": 2, "period": 2 * math.pi, "points": 64}
_FRAME_LEVELS = [2e-3, 1e-3, 5e-4]

SCENARIOS: dict[str, dict[str, Any]] = {
    "hamilton_gaussian": {
        "description": "Hamilton matrix estimate on the heat kernel (equality case), T^1",
        "model": {"variant": "flat_torus", "dim": 1, "period": 20.0, "points": 512},
        "initial": {"kind": "heat_kernel_seed", "center": [10.0]},
        "time": {"t_start": 0.01, "t_end": 0.5, "dt": 0.001},
        "verify": ["matrix"],
        "tolerance": {"margin": 1e-3, "tightness": 1e-2},
    },
    "li_yau_gaussian": {
        "description": "Li-Yau Laplacian estimate on the heat kernel (equality case), T^1",
        "model": {"variant": "flat_torus", "dim": 1, "period": 20.0, "points": 512},
        "initial": {"kind": "heat_kernel_seed", "center": [10.0]},
        "time": {"t_start": 0.01, "t_end": 0.5, "dt": 0.001},
        "verify": ["li_yau"],
        "tolerance": {"margin": 1e-3, "tightness": 1e-2},
    },
    "li_xu_gaussian": {
        "description": "Li-Xu estimate (scalar theorem with X = U = 0, K = 0.1) on the heat kernel, T^1",
        "model": {"variant": "flat_torus", "dim": 1, "period": 20.0, "points": 512},
        "initial": {"kind": "heat_kernel_seed", "center": [10.0]},
        "time": {"t_start": 0.01, "t_end": 0.5, "dt": 0.001},
        "constants": {"policy": "user", "K": 0.1},
        "verify": ["li_xu", "li_yau"],
    },
    "cao_ni_gaussian": {
        "description": "Cao-Ni Kahler estimate on the heat kernel (equality case), flat T^2",
        "model": {"variant": "flat_torus", "dim": 2, "period": 20.0, "points": 128},
        "initial": {"kind": "heat_kernel_seed", "center": [10.0, 10.0], "t0": 0.1},
        "time": {"t_start": 0.1, "t_end": 0.5, "dt": 0.002},
        "verify": ["kahler"],
        "tolerance": {"margin": 1e-3, "tightness": 1e-2},
    },
    "matrix_potential": {
        "description": "Matrix theorem with X = grad(0.3 sin x), U = 0.2 cos y on T^2, k = best_k",
        "model": dict(_T2_2PI),
        "drift": {"name": "gradient_sine", "amplitude": 0.3, "wave": [1, 0]},
        "potential": {"name": "cosine", "amplitude": 0.2, "wave": [0, 1]},
        "initial": dict(_T2_SMOOTH_INITIAL),
        "time": {"t_start": 0.0, "t_end": 2.0, "dt": 0.002, "t_min": 0.05},
        "verify": ["matrix", "kahler"],
    },
    "scalar_rotational": {
        "description": "Scalar theorem with non-gradient X = (0.5 sin y, 0.5 sin x), lambda = 0.5, T^2",
        "model": dict(_T2_2PI),
        "drift": {"name": "cross_sine", "amplitude": 0.5},
        "initial": dict(_T2_SMOOTH_INITIAL),
        "time": {"t_start": 0.0, "t_end": 2.0, "dt": 0.002, "t_min": 0.05},
        "constants": {"policy": "auto", "lambda": 0.5},
        "verify": ["scalar"],
    },
    "honesty_undersized_k": {
        "description": "U = cos y on T^2 needs k = sqrt(2); k = 0 is forced and the failure must be reported",
        "model": {"variant": "flat_torus", "dim": 2, "period": 2 * math.pi, "points": 32},
        "potential": {"name": "cosine", "amplitude": 1.0, "wave": [0, 1]},
        "initial": {"kind": "constant", "value": 1.0},
        "time": {"t_start": 0.0, "t_end": 4.0, "dt": 0.01, "t_min": 0.05},
        "constants": {"policy": "user", "k": 0.0},
        "override": True,
        "refinement": False,
        "verify": ["matrix"],
    },
    "frames_heat_kernel": {
        "description": "Flow of Y, adapted frames and the Bochner-type identity on the T^1 heat kernel",
        "model": {"variant": "flat_torus", "dim": 1, "period": 20.0, "points": 256},
        "initial": {"kind": "heat_kernel_seed", "center": [10.0], "t0": 1.0},
        "time": {"t_start": 1.0, "t_end": 1.1, "dt": 1e-3},
        "frames": {"x0": [[10.7]], "dt_levels": list(_FRAME_LEVELS)},
        "verify": ["frames"],
    },
    "frames_gradient_t2": {
        "description": "Adapted frames for X = grad(0.3 sin x), U = 0.2 cos y on T^2 (frame stays fixed)",
        "model": dict(_T2_2PI),
        "drift": {"name": "gradient_sine", "amplitude": 0.3, "wave": [1, 0]},
        "potential": {"name": "cosine", "amplitude": 0.2, "wave": [0, 1]},
        "initial": dict(_T2_SMOOTH_INITIAL),
        "time": {"t_start": 0.0, "t_end": 0.2, "dt": 1e-3},
        "frames": {"x0": [[1.0, 2.0]], "dt_levels": list(_FRAME_LEVELS)},
        "verify": ["frames"],
    },
    "frames_rotational": {
        "description": "Adapted frames for the non-gradient drift X = (0.5 sin y, 0.5 sin x) on T^2",
        "model": dict(_T2_2PI),
        "drift": {"name": "cross_sine", "amplitude": 0.5},
        "initial": dict(_T2_SMOOTH_INITIAL),
        "time": {"t_start": 0.0, "t_end": 0.2, "dt": 1e-3},
        "frames": {"x0": [[1.0, 2.0]], "dt_levels": list(_FRAME_LEVELS)},
        "verify": ["frames"],
    },
    "kahler_identities": {
        "description": "Kahler curvature identities and the nabla-Rm trace relation on ConformalTorus and Sphere2",
        "verify": ["geometry"],
    },
    "mass_pairing": {
        "description": "U = div X pairing on T^2: mass conservation and finite-difference oracle agreement",
        "model": dict(_T2_2PI),
        "drift": {"name": "gradient_sine", "amplitude": 0.3, "wave": [1, 1]},
        "potential": {"name": "divergence_of_drift"},
        "initial": dict(_T2_SMOOTH_INITIAL),
        "time": {"t_start": 0.0, "t_end": 0.5, "dt": 0.002},
        "verify": ["mass_balance", "fd_oracle"],
    },
}


def scenario(name: str) -> dict[str, Any]:
    if name not in SCENARIOS:
        raise ConfigError("scenario", f"unknown scenario {name!r}; known: {', '.join(sorted(SCENARIOS))}")
    cfg = copy.deepcopy(SCENARIOS[name])
    cfg["name"] = name
    return cfg


# ---------------------------------------------------------------------------
# validation


def _get(cfg: dict, path: str, default=None):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def _number(cfg: dict, path: str, default=None, *, positive=False, nonneg=False) -> float | None:
    v = _get(cfg, path, default)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(path, f"expected a finite number, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(path, f"must be positive, got {v!r}")
    if nonneg and v < 0:
        raise ConfigError(path, f"must be non-negative, got {v!r}")
    return float(v)


def _vector(cfg: dict, path: str, dim: int, default=None) -> np.ndarray | None:
    v = _get(cfg, path, default)
    if v is None:
        return None
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected a list of {dim} numbers") from None
    if arr.shape != (dim,) or not np.all(np.isfinite(arr)):
        raise ConfigError(path, f"expected a list of {dim} finite numbers, got {v!r}")
    return arr


def validate(cfg: Any) -> dict:
    """Check a configuration and fill defaults; raises :class:`ConfigError`."""
    if not isinstance(cfg, dict):
        raise ConfigError("<root>", "configuration must be a JSON object")
    cfg = copy.deepcopy(cfg)
    verify = cfg.get("verify")
    if not isinstance(verify, list) or not verify:
        raise ConfigError("verify", "must be a non-empty list of checks")
    for i, name in enumerate(verify):
        if name not in CHECKS:
            raise ConfigError(f"verify[{i}]", f"unknown check {name!r}; known: {', '.join(CHECKS)}")
    cfg.setdefault("name", "custom")
    needs_pde = any(c != "geometry" for c in verify)
    if needs_pde:
        _validate_pde(cfg)
    tol = cfg.setdefault("tolerance", {})
    if not isinstance(tol, dict):
        raise ConfigError("tolerance", "must be an object")
    tol["margin"] = _number(cfg, "tolerance.margin", ver.DEFAULT_TOL, positive=True)
    tol["rel_floor"] = _number(cfg, "tolerance.rel_floor", ver.DEFAULT_REL_FLOOR, positive=True)
    if _get(cfg, "tolerance.tightness") is not None:
        tol["tightness"] = _number(cfg, "tolerance.tightness", positive=True)
    if not isinstance(cfg.setdefault("override", False), bool):
        raise ConfigError("override", "must be true or false")
    if not isinstance(cfg.setdefault("refinement", any(c in MARGIN_CHECKS for c in verify)), bool):
        raise ConfigError("refinement", "must be true or false")
    return cfg


def _validate_pde(cfg: dict):
    model = cfg.get("model")
    if not isinstance(model, dict):
        raise ConfigError("model", "missing model section")
    if model.get("variant", "flat_torus") != "flat_torus":
        raise ConfigError("model.variant", "PDE runs support 'flat_torus' only")
    model["variant"] = "flat_torus"
    dim = model.get("dim")
    if dim not in (1, 2, 3):
        raise ConfigError("model.dim", f"must be 1, 2 or 3, got {dim!r}")
    _number(cfg, "model.period", positive=True)
    if model.get("period") is None:
        raise ConfigError("model.period", "missing")
    pts = model.get("points")
    if isinstance(pts, bool) or not isinstance(pts, int) or pts < 8 or pts % 2:
        raise ConfigError("model.points", f"must be an even integer >= 8, got {pts!r}")

    for key, names in (("drift", DRIFTS), ("potential", POTENTIALS)):
        sec = cfg.setdefault(key, {"name": "zero"})
        if not isinstance(sec, dict) or sec.get("name") not in names:
            raise ConfigError(f"{key}.name", f"must be one of {', '.join(names)}")

    t_start = _number(cfg, "time.t_start", 0.0, nonneg=True)
    t_end = _number(cfg, "time.t_end")
    if t_end is None:
        raise ConfigError("time.t_end", "missing")
    if not t_end > t_start:
        raise ConfigError("time.t_end", f"must exceed time.t_start={t_start}")
    if _number(cfg, "time.dt") is None:
        raise ConfigError("time.dt", "missing")
    _number(cfg, "time.dt", positive=True)
    _number(cfg, "time.t_min", nonneg=True)
    stride = _get(cfg, "time.stride")
    if stride is not None and (isinstance(stride, bool) or not isinstance(stride, int) or stride < 1):
        raise ConfigError("time.stride", "must be a positive integer")
    cfg["time"]["t_start"] = t_start

    init = cfg.get("initial")
    if not isinstance(init, dict):
        raise ConfigError("initial", "missing initial condition")
    kind = init.get("kind")
    if kind not in INITIAL_KINDS:
        raise ConfigError("initial.kind", f"must be one of {', '.join(INITIAL_KINDS)}")
    if kind == "constant":
        _number(cfg, "initial.value", 1.0, positive=True)
    elif kind == "single_mode":
        off = _number(cfg, "initial.offset", 2.0)
        amp = _number(cfg, "initial.amplitude", 1.0)
        if not off > abs(amp):
            raise ConfigError("initial.offset", "must exceed |initial.amplitude| for a positive solution")
        _vector(cfg, "initial.wave", dim, [1] + [0] * (dim - 1))
    elif kind == "heat_kernel_seed":
        _vector(cfg, "initial.center", dim)
        if _number(cfg, "initial.t0", t_start if t_start > 0 else None, positive=True) is None:
            raise ConfigError("initial.t0", "needed when time.t_start = 0")
        _number(cfg, "initial.floor", SEED_FLOOR, nonneg=True)
    elif "values" not in init:
        raise ConfigError("initial.values", "custom initial condition needs grid samples")

    cons = cfg.setdefault("constants", {})
    if not isinstance(cons, dict):
        raise ConfigError("constants", "must be an object")
    policy = cons.setdefault("policy", "auto")
    if policy not in ("auto", "user"):
        raise ConfigError("constants.policy", "must be 'auto' or 'user'")
    if cons.get("lambda") == "optimize":
        if policy != "auto":
            raise ConfigError("constants.lambda", "'optimize' needs constants.policy = 'auto'")
        _number(cfg, "constants.optimize_at", positive=True)
    else:
        _number(cfg, "constants.lambda", nonneg=True)
    for key in ("k", "K", "k1", "k2"):
        _number(cfg, f"constants.{key}", nonneg=key != "k1")
    if policy == "auto":
        for key in ("k", "K", "k1", "k2"):
            if key in cons:
                raise ConfigError(f"constants.{key}", "user values need constants.policy = 'user'")

    if "frames" in cfg["verify"]:
        sec = cfg.setdefault("frames", {})
        x0 = sec.get("x0")
        if not isinstance(x0, list) or not x0:
            raise ConfigError("frames.x0", "needs a list of starting points")
        for i in range(len(x0)):
            try:
                arr = np.asarray(x0[i], dtype=float)
            except (TypeError, ValueError):
                raise ConfigError(f"frames.x0[{i}]", "not a point") from None
            if arr.shape != (dim,):
                raise ConfigError(f"frames.x0[{i}]", f"must have {dim} coordinates")
        levels = sec.setdefault("dt_levels", [cfg["time"]["dt"]])
        if not isinstance(levels, list) or not levels or any(
                isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0 for v in levels):
            raise ConfigError("frames.dt_levels", "must be a non-empty list of positive steps")


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class Setup:
    cfg: dict
    model: geo.FlatTorus
    spec: Any
    derived: Any
    rho0: np.ndarray
    t_start: float
    t_end: float
    origin: float
    t_min: float


def _initial(cfg: dict, grid: Grid) -> tuple[np.ndarray, float | None]:
    """``(rho0, seed_t0)``; ``seed_t0`` is set for heat-kernel seeds."""
    init = cfg["initial"]
    kind = init["kind"]
    if kind == "constant":
        return np.full(grid.shape, float(init.get("value", 1.0))), None
    if kind == "single_mode":
        wave = np.asarray(init.get("wave", [1] + [0] * (grid.dim - 1)), dtype=float)
        mode = np.ones(grid.shape)
        for a, c in enumerate(grid.coords):
            mode = mode * np.cos(wave[a] * c)
        return float(init.get("offset", 2.0)) + float(init.get("amplitude", 1.0)) * mode, None
    if kind == "heat_kernel_seed":
        t0 = float(init.get("t0", cfg["time"]["t_start"]))
        center = init.get("center", [p / 2 for p in grid.periods])
        try:
            rho = heat_kernel_seed(grid, center, t0)
        except ValueError as exc:
            raise ConfigError("initial.t0", str(exc)) from None
        return rho + float(init.get("floor", SEED_FLOOR)), t0
    values = np.asarray(init["values"], dtype=float)
    if values.shape != grid.shape:
        raise ConfigError("initial.values", f"expected shape {grid.shape}, got {values.shape}")
    if not np.all(np.isfinite(values)) or values.min() <= 0:
        raise ConfigError("initial.values", "samples must be finite and positive")
    return values, None


def build_setup(cfg: dict, points: int | None = None) -> Setup:
    m = cfg["model"]
    model = geo.FlatTorus(m["dim"], float(m["period"]), points or m["points"])
    try:
        spec = make_drift_spec(model, cfg.get("drift"), cfg.get("potential"))
    except (ValueError, KeyError) as exc:
        raise ConfigError("drift", str(exc)) from None
    derived = derive(spec)
    rho0, seed_t0 = _initial(cfg, model.grid)
    t_start, t_end = cfg["time"]["t_start"], float(cfg["time"]["t_end"])
    # the theorems' clock: a heat-kernel seed of the pure heat equation is the
    # exact solution started from a point mass at t_start - t0
    origin = t_start - seed_t0 if (seed_t0 is not None and spec.is_trivial) else t_start
    origin = float(cfg["time"].get("origin", origin))
    t_min = cfg["time"].get("t_min")
    if t_min is None:
        t_min = t_start - origin if seed_t0 is not None else DEFAULT_T_MIN
    return Setup(cfg, model, spec, derived, rho0, t_start, t_end, origin, float(t_min))


def _solve(setup: Setup, dt: float | None = None, stride=None, max_snapshots=200):
    cfg = setup.cfg
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        traj = solve(setup.model, setup.spec, setup.rho0, setup.t_start, setup.t_end,
                     float(dt or cfg["time"]["dt"]),
                     max_snapshots=max_snapshots, stride=stride or cfg["time"].get("stride"),
                     origin=setup.origin)
    for w in caught:
        log.warning("%s", w.message)
    return traj, [str(w.message) for w in caught]


def _extraction_lambda(cfg: dict, needs: set[str]) -> float | None:
    """``lambda`` for constant extraction; ``None`` when no check uses ``k1``/``k2``.

    Without a user value the scalar check uses ``lambda = 0``, which is only
    admissible when ``div A = 0``.
    """
    lam = cfg.get("constants", {}).get("lambda")
    if lam is not None:
        return float(lam)
    return 0.0 if "k1" in needs else None


def _optimised_lambda(cfg: dict, setup: Setup) -> float:
    """Golden-section choice of ``lambda`` minimising ``c(t)`` at ``constants.optimize_at``."""
    t = float(cfg["constants"].get("optimize_at", setup.t_end - setup.origin))
    return ver.optimize_lambda(setup.derived, t)


def resolve_constants(cfg: dict, setup: Setup, needs: set[str]) -> tuple[dict, dict, hy.HypothesisReport]:
    """Constants used by the margins and their provenance (``auto`` or ``user``)."""
    cons = cfg.get("constants", {})
    lambda_origin = {"optimize": "optimized", None: "auto"}.get(cons.get("lambda"), "user")
    if cons.get("lambda") == "optimize":
        cfg = copy.deepcopy(cfg)
        cfg["constants"]["lambda"] = _optimised_lambda(cfg, setup)
        cons = cfg["constants"]
    lam = _extraction_lambda(cfg, needs)
    try:
        report = hy.extract(setup.model, setup.derived, lam)
    except ValueError as exc:
        raise ConfigError("constants.lambda", str(exc)) from None
    auto = {"k": report.k, "k_kahler": report.k_kahler, "K": report.K, "lambda": lam,
            "k1": report.k1, "k2": report.k2}
    used, source = {}, {}
    for key, value in auto.items():
        user_key = "k" if key == "k_kahler" else key
        if cons.get("policy") == "user" and user_key in cons:
            used[key], source[key] = float(cons[user_key]), "user"
        elif cons.get("policy") == "user" and user_key in needs and key != "k_kahler" and key != "lambda":
            raise ConfigError(f"constants.{user_key}", "required with constants.policy = 'user'")
        else:
            used[key], source[key] = value, "auto"
    source["lambda"] = lambda_origin
    return used, source, report


def _margin_needs(verify: list[str]) -> set[str]:
    needs = set()
    if "matrix" in verify or "kahler" in verify:
        needs.add("k")
    if "scalar" in verify:
        needs |= {"K", "k1", "k2"}
    if "li_xu" in verify:
        needs.add("K")
    return needs


def _evaluate_margins(setup: Setup, traj, used: dict, report: hy.HypothesisReport,
                      verify: list[str], tol: float, rel_floor: float, override: bool
                      ) -> dict[str, dict]:
    out = {}
    kw = dict(tol=tol, rel_floor=rel_floor, t_min=setup.t_min)
    flags = report.flags
    n = setup.model.dim
    for check in verify:
        if check not in MARGIN_CHECKS:
            continue
        gate, reason, rep = True, None, None
        if check == "matrix":
            gate = flags["matrix_theorem"]
            reason = "matrix hypotheses not satisfied"
            if gate or override:
                rep = ver.matrix_margin(traj, setup.derived, used["k"], override=override, **kw)
        elif check == "kahler":
            if not setup.model.has_complex_structure:
                raise ConfigError("verify", "kahler check needs an even-dimensional torus")
            gate = flags["kahler_theorem"]
            reason = "Kahler hypotheses not satisfied"
            if gate or override:
                rep = ver.kahler_margin(traj, setup.derived, setup.model.J, used["k_kahler"],
                                        override=override, **kw)
        elif check == "scalar":
            k1 = used["k1"]
            params = ver.HarnackParams(k=used["k"], K=used["K"], lam=used["lambda"],
                                       k1=max(k1, 0.0), k2=used["k2"], n=n)
            if params.chi == 0:
                raise ConfigError("verify", "all scalar constants vanish (chi = 0); use li_yau")
            rep = ver.scalar_margin(traj, setup.derived, params, **kw)
            rep.meta["k1_extracted"] = k1
        elif check == "li_yau":
            if not setup.spec.is_trivial:
                raise ConfigError("verify", "li_yau needs drift zero and potential zero")
            rep = ver.li_yau_margin(traj, setup.spec, **kw)
        elif check == "li_xu":
            if not setup.spec.is_trivial:
                raise ConfigError("verify", "li_xu needs drift zero and potential zero")
            if not used["K"] > 0:
                raise ConfigError("constants.K", "li_xu needs K > 0")
            rep = ver.li_xu_margin(traj, setup.spec, setup.derived, used["K"], **kw)
        if rep is None:
            out[check] = {"report": None, "summary": {"id": check, "pass": False, "reason": reason}}
        else:
            out[check] = {"report": rep, "summary": rep.summary()}
    return out


def _finalize_margin(entry: dict, tightness: float | None):
    s = entry["summary"]
    if entry["report"] is None:
        return
    if tightness is not None:
        s["tightness_bound"] = tightness
        s["pass"] = bool(s["pass"] and s["global_min_margin"] <= tightness)


def _frames_check(setup: Setup, cfg: dict) -> tuple[dict, dict[str, str]]:
    sec = cfg["frames"]
    levels = [float(v) for v in sec["dt_levels"]]
    tols = {"bochner": 1e-3, "eqY": 1e-3, "dlog": 1e-4, "orthonormality": 1e-8,
            "determinant": 1e-8, "two_way_S": 1e-8, "ratio_low": 2.5, "ratio_high": 6.0}
    tols.update(sec.get("tolerances", {}))
    files, per_level = {}, []
    for j, dt in enumerate(levels):
        traj, _ = _solve(setup, dt=dt, stride=1, max_snapshots=None)
        yf = fr.YField(traj, setup.derived)
        eq = fr.eqY_residual(traj, setup.derived, cfg["tolerance"]["rel_floor"])
        dl = fr.dlog_identity_residual(traj, setup.derived, cfg["tolerance"]["rel_floor"])
        seeds = []
        for i, x0 in enumerate(sec["x0"]):
            path = fr.flow_from_snapshots(yf, x0)
            ft = fr.transport_adapted_frame(path, yf)
            res = fr.bochner_residuals(ft)
            files[f"frames_x{i}_dt{j}.csv"] = fr.frames_csv(ft, res, eq)
            seeds.append({
                "x0": [float(c) for c in x0],
                "bochner": res.max_bochner,
                "sy1": float(res.sy1.max()),
                "trace": float(res.trace.max()),
                "orthonormality_drift": float(ft.orthonormality_drift.max()),
                "determinant_deviation": float(np.abs(ft.determinants - 1).max()),
                "two_way_S": ft.two_way_S_residual,
                "frame_motion": float(np.abs(ft.frames - ft.frames[0]).max()),
                "corrections": len(ft.corrections),
                "end_point": [float(c) for c in path.points[-1]],
            })
        per_level.append({"dt": traj.dt, "eqY": eq.max, "dlog": dl.max, "seeds": seeds})
    # single-level thresholds apply at the configured step (else the finest level)
    ref = min(range(len(levels)), key=lambda j: (abs(levels[j] - float(cfg["time"]["dt"])), levels[j]))
    first = per_level[ref]
    ok = first["eqY"] <= tols["eqY"] and first["dlog"] <= tols["dlog"]
    for s in first["seeds"]:
        ok = ok and s["bochner"] <= tols["bochner"]
    for lev in per_level:
        for s in lev["seeds"]:
            ok = (ok and s["orthonormality_drift"] <= tols["orthonormality"]
                  and s["determinant_deviation"] <= tols["determinant"]
                  and s["two_way_S"] <= tols["two_way_S"])
    ratios = []
    for a, b in zip(per_level[:-1], per_level[1:]):
        for sa, sb in zip(a["seeds"], b["seeds"]):
            if sb["bochner"] < 1e-10:
                ratios.append(None)  # already at round-off; no order to measure
                continue
            r = sa["bochner"] / sb["bochner"]
            ratios.append(r)
            ok = ok and tols["ratio_low"] <= r <= tols["ratio_high"]
    return {"id": "frames", "levels": per_level, "reference_level": ref, "bochner_ratios": ratios,
            "tolerances": tols,
            "pass": bool(ok)}, files


def _oracle_window(setup: Setup) -> tuple[np.ndarray, float, float]:
    """Initial data and window for the finite-difference comparison (at most 0.5 long).

    Heat-kernel seeds are started late enough to be resolved (width >= 3 cells).
    """
    init = setup.cfg["initial"]
    t_start = setup.t_start
    rho0 = setup.rho0
    if init["kind"] == "heat_kernel_seed":
        h = min(setup.model.grid.spacing)
        t0 = float(init.get("t0", t_start))
        t0_res = max(t0, (3 * h) ** 2 / 2)
        if t0_res > t0:
            center = init.get("center", [p / 2 for p in setup.model.grid.periods])
            rho0 = heat_kernel_seed(setup.model.grid, center, t0_res) + float(init.get("floor", SEED_FLOOR))
            t_start = t_start + (t0_res - t0)
    return rho0, t_start, t_start + min(0.5, setup.t_end - setup.t_start)


def fd_oracle_check(setup: Setup, dt: float | None = None, bound: float = 10.0) -> dict:
    """Spectral vs finite-difference solutions: ``sup|diff| / (max|rho| (h^2 + dt))``."""
    rho0, t0, t1 = _oracle_window(setup)
    dt = float(dt or setup.cfg["time"]["dt"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        traj = solve(setup.model, setup.spec, rho0, t0, t1, dt, max_snapshots=2)
    rho_fd, dt_fd = fd_solve(setup.model, setup.spec, rho0, t0, t1)
    h = min(setup.model.grid.spacing)
    diff = float(np.abs(traj.snapshots[-1] - rho_fd).max())
    scale = float(np.abs(traj.snapshots[-1]).max())
    const = diff / (scale * (h * h + dt_fd))
    return {"id": "fd_oracle", "sup_difference": diff, "h": h, "dt_fd": dt_fd, "window": [t0, t1],
            "constant": const, "bound": bound, "pass": bool(const <= bound)}


def geometry_check(cfg: dict | None = None) -> dict:
    sec = dict((cfg or {}).get("geometry", {}))
    amp = float(sec.get("amplitude", 0.2))
    m = int(sec.get("points", 64))
    samples = int(sec.get("samples", 5))
    rng = np.random.default_rng(int(sec.get("seed", 0)))
    grid = Grid.uniform(2, m, 2 * math.pi)
    x = grid.coords[0]
    conf = geo.ConformalTorus(grid, amp * np.sin(x))
    vecs = np.vstack([np.eye(2), rng.normal(size=(2, 2))])
    conf_pts = rng.uniform(0, 2 * math.pi, size=(samples, 2))
    conf_kahler = geo.check_kahler_identities(conf, conf_pts, vecs)
    conf_lemma, conf_nrm = 0.0, 0.0
    for p in conf_pts:
        conf_nrm = max(conf_nrm, float(np.abs(conf.nabla_rm(p)).max()))
        for v in vecs:
            conf_lemma = max(conf_lemma, geo.lemma_rm_trace(conf, v, p)[2])
    conf_sym = max(geo.curvature(conf, p).symmetry_residual() for p in conf_pts)
    radius = float(sec.get("radius", 1.0))
    sph = geo.Sphere2(radius)
    sph_pts = np.column_stack([rng.uniform(0.3, math.pi - 0.3, samples),
                               rng.uniform(0, 2 * math.pi, samples)])
    sph_kahler = geo.check_kahler_identities(sph, sph_pts, vecs)
    sph_lemma = max(geo.lemma_rm_trace(sph, v, p)[2] for p in sph_pts for v in vecs)
    sph_sectional = max(abs(geo.curvature(sph, p).sectional([1, 0], [0, 1]) - radius**-2) for p in sph_pts)
    tol = {"conformal_kahler": 1e-6, "conformal_lemma": 1e-5, "sphere": 1e-8}
    tol.update(sec.get("tolerances", {}))
    ok = (conf_kahler <= tol["conformal_kahler"] and conf_lemma <= tol["conformal_lemma"]
          and sph_kahler <= tol["sphere"] and sph_lemma <= tol["sphere"] and sph_sectional <= tol["sphere"])
    return {
        "id": "geometry",
        "conformal": {"amplitude": amp, "points": m, "kahler_residual": conf_kahler,
                      "lemma_residual": conf_lemma, "max_nabla_rm": conf_nrm,
                      "symmetry_residual": conf_sym},
        "sphere": {"radius": radius, "kahler_residual": sph_kahler, "lemma_residual": sph_lemma,
                   "sectional_error": sph_sectional},
        "tolerances": tol,
        "pass": bool(ok),
    }


def _fields_csv(traj, derived) -> str:
    rho = traj.snapshots[-1]
    grid = traj.grid
    ld = LogDerivatives(rho, grid)
    Y = -2.0 * ld.gradient() - derived.spec.X
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = grid.dim
    w.writerow([f"x{a}" for a in range(n)] + ["rho", "log_rho"] + [f"Y{a}" for a in range(n)])
    coords = grid.coords.reshape(n, -1)
    flat_rho = rho.reshape(-1)
    flatY = Y.reshape(n, -1)
    for i in range(flat_rho.size):
        w.writerow([repr(float(c)) for c in coords[:, i]]
                   + [repr(float(flat_rho[i])), repr(float(math.log(flat_rho[i])))]
                   + [repr(float(v)) for v in flatY[:, i]])
    return buf.getvalue()


@dataclass
class RunResult:
    summary: dict
    files: dict[str, str] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return int(self.summary["exit_code"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def apply_overrides(cfg: dict, tolerance: float | None = None, grid_override: int | None = None) -> dict:
    cfg = copy.deepcopy(cfg)
    if tolerance is not None:
        cfg.setdefault("tolerance", {})["margin"] = tolerance
    if grid_override is not None and isinstance(cfg.get("model"), dict):
        cfg["model"]["points"] = grid_override
    return cfg


def run_config(cfg: dict, only: list[str] | None = None) -> RunResult:
    """Execute a validated configuration; never raises for check failures."""
    cfg = validate(cfg)
    verify = [c for c in cfg["verify"] if only is None or c in only]
    summary: dict[str, Any] = {"schema_version": SCHEMA_VERSION, "scenario": cfg["name"],
                               "config": cfg, "checks": {}}
    files: dict[str, str] = {}
    checks = summary["checks"]
    tol = cfg["tolerance"]

    if "geometry" in verify:
        checks["geometry"] = geometry_check(cfg)

    pde_checks = [c for c in verify if c != "geometry"]
    if pde_checks:
        setup = build_setup(cfg)
        summary["model"] = {"variant": "flat_torus", "dim": setup.model.dim,
                            "periods": list(setup.model.grid.periods),
                            "points": list(setup.model.grid.points)}
        summary["time"] = {"t_start": setup.t_start, "t_end": setup.t_end, "origin": setup.origin,
                           "t_min": setup.t_min}
        summary["w_precision"] = w_precision_check(setup.spec, setup.derived)
        margin_checks = [c for c in pde_checks if c in MARGIN_CHECKS]
        if margin_checks:
            used, source, report = resolve_constants(cfg, setup, _margin_needs(verify))
            summary["hypotheses"] = report.to_dict()
            summary["constants"] = {"used": used, "source": source, "override": cfg["override"]}
        try:
            if margin_checks or "mass_balance" in pde_checks:
                traj, solver_warnings = _solve(setup)
                summary["solver"] = {"dt": traj.dt, "snapshots": len(traj), "warnings": solver_warnings,
                                     "min_rho": float(traj.min_rho.min())}
                files[f"fields_{traj.times[-1]:.6g}.csv"] = _fields_csv(traj, setup.derived)
            if margin_checks:
                results = _evaluate_margins(setup, traj, used, report, margin_checks, tol["margin"],
                                            tol["rel_floor"], cfg["override"])
                if cfg["refinement"]:
                    fine = build_setup(cfg, points=2 * cfg["model"]["points"])
                    # halve the step too, so the estimate covers time as well as space;
                    # the finer grid has a smaller stability bound, stay below it silently
                    fine_traj, _ = _solve(fine, dt=min(0.5 * traj.dt,
                                                       stability_bound(fine.model.grid, fine.spec)))
                    fine_used, _, fine_report = resolve_constants(cfg, fine, _margin_needs(verify))
                    fine_results = _evaluate_margins(fine, fine_traj, fine_used, fine_report,
                                                     margin_checks, tol["margin"], tol["rel_floor"],
                                                     cfg["override"])
                    summary["hypotheses_refinement"] = hy.refinement_check(report, fine_report)
                    for key, entry in results.items():
                        if entry["report"] is not None and fine_results[key]["report"] is not None:
                            entry["summary"]["discretization_error"] = abs(
                                entry["report"].global_min - fine_results[key]["report"].global_min)
                for key, entry in results.items():
                    _finalize_margin(entry, tol.get("tightness"))
                    checks[key] = entry["summary"]
                    if entry["report"] is not None:
                        files[f"margins_{key}.csv"] = entry["report"].to_csv()
            if "mass_balance" in pde_checks:
                res = mass_balance_check(traj, setup.spec)
                checks["mass_balance"] = {"id": "mass_balance", "residual": res, "bound": 1e-6,
                                          "pass": bool(res <= 1e-6)}
            if "fd_oracle" in pde_checks:
                checks["fd_oracle"] = fd_oracle_check(setup)
            if "frames" in pde_checks:
                checks["frames"], frame_files = _frames_check(setup, cfg)
                files.update(frame_files)
        except SolverAbort as exc:
            summary["error"] = {"kind": "solver_abort", "message": str(exc), "time": exc.time}
            summary["pass"] = False
            summary["exit_code"] = EXIT_ABORT
            return RunResult(_jsonable(summary), files)
    summary["pass"] = all(c["pass"] for c in checks.values())
    summary["exit_code"] = EXIT_OK if summary["pass"] else EXIT_FAIL
    return RunResult(_jsonable(summary), files)


def write_outputs(result: RunResult, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    for name, content in sorted(result.files.items()):
        (out / name).write_text(content)


# ---------------------------------------------------------------------------
# sweep


def set_dotted(cfg: dict, path: str, value):
    parts = path.split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def sweep(cfg: dict, parameter: str, values: list) -> tuple[list[dict], str]:
    """One run per value; returns the rows and the consolidated CSV."""
    if not values:
        raise ConfigError("values", "empty value list")
    rows = []
    for v in values:
        run_cfg = copy.deepcopy(cfg)
        set_dotted(run_cfg, parameter, v)
        try:
            res = run_config(run_cfg)
            s = res.summary
            row = {"value": v, "exit_code": s["exit_code"], "pass": s["pass"]}
            for cid, c in sorted(s["checks"].items()):
                row[f"{cid}_pass"] = c["pass"]
                if "global_min_margin" in c:
                    row[f"{cid}_global_min"] = c["global_min_margin"]
                    row[f"{cid}_discretization_error"] = c.get("discretization_error")
        except ConfigError as exc:
            row = {"value": v, "exit_code": EXIT_CONFIG, "pass": False, "error": str(exc)}
        rows.append(row)
    columns = ["value", "exit_code", "pass"]
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([parameter if c == "value" else c for c in columns])
    for row in rows:
        w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                    for c in columns])
    return rows, buf.getvalue()


# ---------------------------------------------------------------------------
# argument handling


def merge_config(base: dict, overrides: dict) -> dict:
    """Recursively overlay ``overrides`` on ``base``; nested sections merge key by key."""
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _load_config(args) -> dict:
    if args.config and args.scenario:
        raise ConfigError("--config", "give either --config or --scenario, not both")
    if args.scenario:
        cfg = scenario(args.scenario)
    elif args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON: {exc}") from None
        if isinstance(cfg, dict) and "scenario" in cfg and "verify" not in cfg:
            cfg = merge_config(scenario(cfg.pop("scenario")), cfg)
    else:
        raise ConfigError("--config", "a configuration file or --scenario is required")
    return apply_overrides(cfg, args.tolerance, args.grid_override)


def _add_common(p: argparse.ArgumentParser, config_required: bool = True):
    p.add_argument("--config", metavar="PATH", help="JSON scenario configuration")
    p.add_argument("--scenario", metavar="NAME", help="built-in scenario name")
    p.add_argument("--out", metavar="DIR", default=None, help="directory for reports")
    p.add_argument("--tolerance", metavar="X", type=float, default=None, help="margin pass tolerance")
    p.add_argument("--grid-override", metavar="M", type=int, default=None,
                   help="grid points per axis")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harnacklab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run every check of a scenario"),
                       ("hypotheses", "extract theorem constants and their refinement convergence"),
                       ("frames", "run the frame and flow-line checks of a scenario")):
        _add_common(sub.add_parser(name, help=text))
    p = sub.add_parser("sweep", help="re-run a scenario across values of one parameter")
    _add_common(p)
    p.add_argument("--parameter", required=True, help="dotted config path, e.g. constants.lambda")
    p.add_argument("--values", required=True, help="comma-separated values (JSON literals)")
    p = sub.add_parser("geometry-tests", help="curvature identity checks on the curved models")
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--out", metavar="DIR", default=None)
    sub.add_parser("list-scenarios", help="list the built-in scenarios")
    return parser


def _emit(result: RunResult, out: str | None):
    if out:
        write_outputs(result, Path(out))
    print(json.dumps({"scenario": result.summary.get("scenario"), "pass": result.summary["pass"],
                      "exit_code": result.summary["exit_code"],
                      "checks": {k: v["pass"] for k, v in result.summary["checks"].items()}},
                     sort_keys=True))


def _hypotheses_command(cfg: dict) -> RunResult:
    cfg = validate({**cfg, "verify": [c for c in cfg.get("verify", []) if c != "geometry"] or ["matrix"]})
    setup = build_setup(cfg)
    if cfg["constants"].get("lambda") == "optimize":
        cfg["constants"]["lambda"] = _optimised_lambda(cfg, setup)
    lam = _extraction_lambda(cfg, _margin_needs(cfg["verify"]))
    try:
        coarse = hy.extract(setup.model, setup.derived, lam)
        fine_setup = build_setup(cfg, points=2 * cfg["model"]["points"])
        fine = hy.extract(fine_setup.model, fine_setup.derived, lam)
    except ValueError as exc:
        raise ConfigError("constants.lambda", str(exc)) from None
    ref = hy.refinement_check(coarse, fine)
    ref["id"] = "refinement"
    summary = {"schema_version": SCHEMA_VERSION, "scenario": cfg["name"], "config": cfg,
               "hypotheses": coarse.to_dict(), "hypotheses_refined": fine.to_dict(),
               "checks": {"refinement": ref}, "pass": ref["pass"],
               "exit_code": EXIT_OK if ref["pass"] else EXIT_FAIL}
    return RunResult(_jsonable(summary))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "list-scenarios":
            for name in sorted(SCENARIOS):
                print(f"{name:24s} {SCENARIOS[name]['description']}")
            return EXIT_OK
        if args.command == "geometry-tests":
            cfg = json.loads(Path(args.config).read_text()) if args.config else {}
            res = run_config({**cfg, "verify": ["geometry"], "name": cfg.get("name", "geometry-tests")})
            _emit(res, args.out)
            return res.exit_code
        cfg = _load_config(args)
        if args.command == "run":
            res = run_config(cfg)
        elif args.command == "frames":
            res = run_config(cfg, only=["frames"]) if "frames" in cfg.get("verify", []) else None
            if res is None:
                raise ConfigError("verify", "scenario has no frames check")
        elif args.command == "hypotheses":
            res = _hypotheses_command(cfg)
        else:
            values = [parse_value(v.strip()) for v in args.values.split(",") if v.strip()]
            rows, table = sweep(cfg, args.parameter, values)
            if args.out:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                (Path(args.out) / "sweep.csv").write_text(table)
            sys.stdout.write(table)
            codes = [r["exit_code"] for r in rows]
            if EXIT_CONFIG in codes:
                return EXIT_CONFIG
            if EXIT_ABORT in codes:
                return EXIT_ABORT
            return EXIT_OK if all(c == EXIT_OK for c in codes) else EXIT_FAIL
        _emit(res, args.out)
        return res.exit_code
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
