import math
import warnings

import numpy as np
import pytest

from harnacklab import fields, geometry as geo, solver


def torus(m=32, dim=1, L=2 * math.pi):
    return geo.FlatTorus(dim, L, m)


def spec(model, drift=None, potential=None):
    return fields.make_drift_spec(model, drift, potential)


def test_constant_solution_is_stationary():
    model = torus()
    traj = solver.solve(model, spec(model), np.ones(model.grid.shape), 0.0, 1.0, 0.01)
    assert np.abs(traj.snapshots - 1).max() < 1e-14
    assert traj.times[0] == 0.0 and traj.times[-1] == pytest.approx(1.0)
    assert np.all(np.diff(traj.times) > 0)


def test_constant_potential_gives_exponential():
    model = torus(16, dim=2)
    s = spec(model, None, {"name": "constant", "value": 0.3})
    traj = solver.solve(model, s, np.ones(model.grid.shape), 0.0, 1.0, 1e-3)
    assert np.abs(traj.snapshots[-1] / math.exp(0.3) - 1).max() < 1e-8


def test_single_mode_heat_solution():
    model = torus(32)
    x = model.grid.coords[0]
    traj = solver.solve(model, spec(model), 2 + np.cos(x), 0.0, 1.0, 0.01)
    assert np.abs(traj.snapshots[-1] - (2 + math.exp(-1) * np.cos(x))).max() < 1e-8
    # pure heat flow conserves mass exactly
    assert np.abs(traj.mass - traj.mass[0]).max() < 1e-12


def test_heat_kernel_seed_mass_and_symmetry():
    model = torus(512, L=20.0)
    seed = solver.heat_kernel_seed(model.grid, 10.0, 0.01)
    assert model.grid.integrate(seed) == pytest.approx(1.0, abs=1e-10)
    x = model.grid.axis_nodes(0)
    i0 = int(np.argmin(np.abs(x - 10.0)))
    # nodes at 10 +/- j h are mirror images of each other
    left, right = seed[i0 - 100:i0][::-1], seed[i0 + 1:i0 + 101]
    assert np.abs(left - right).max() < 1e-12
    with pytest.raises(ValueError):
        solver.heat_kernel_seed(model.grid, 10.0, 4.0)  # width 2.83 > 20 / 8
    with pytest.raises(ValueError):
        solver.heat_kernel_seed(model.grid, 10.0, 0.0)


def test_heat_kernel_seed_semigroup():
    model = torus(256, L=20.0)
    s = spec(model)
    floor = 1e-10  # keeps the far tail positive; constants are invariant under heat flow
    seed = solver.heat_kernel_seed(model.grid, 10.0, 0.05) + floor
    traj = solver.solve(model, s, seed, 0.05, 0.3, 1e-3)
    exact = solver.heat_kernel_seed(model.grid, 10.0, 0.3) + floor
    assert np.abs(traj.snapshots[-1] - exact).max() < 1e-6


def test_two_dimensional_seed_is_a_product():
    model = geo.FlatTorus(2, 20.0, 128)
    seed = solver.heat_kernel_seed(model.grid, [8.0, 12.0], 0.1)
    one = solver.heat_kernel_seed(torus(128, L=20.0).grid, 8.0, 0.1)
    two = solver.heat_kernel_seed(torus(128, L=20.0).grid, 12.0, 0.1)
    assert np.abs(seed - np.outer(one, two)).max() < 1e-14
    assert model.grid.integrate(seed) == pytest.approx(1.0, abs=1e-10)


def generic_case(m=32):
    model = torus(m, dim=2)
    s = spec(model, {"name": "cross_sine", "amplitude": 0.5}, {"name": "cosine", "amplitude": 0.4, "wave": [1, 1]})
    x, y = model.grid.coords
    return model, s, 1.5 + np.cos(x) * np.sin(y)


def test_semigroup_property():
    model, s, rho0 = generic_case()
    dt = 1e-3
    whole = solver.solve(model, s, rho0, 0.0, 0.4, dt).snapshots[-1]
    first = solver.solve(model, s, rho0, 0.0, 0.2, dt).snapshots[-1]
    second = solver.solve(model, s, first, 0.2, 0.4, dt).snapshots[-1]
    assert np.abs(whole - second).max() < 1e-8


def test_linearity():
    model, s, rho0 = generic_case()
    a = solver.solve(model, s, rho0, 0.0, 0.3, 1e-3).snapshots[-1]
    b = solver.solve(model, s, 3 * rho0, 0.0, 0.3, 1e-3).snapshots[-1]
    assert np.abs(b - 3 * a).max() < 1e-10


def test_time_step_convergence():
    """The splitting is second order in dt for a drift-reaction problem."""
    model, s, rho0 = generic_case()
    sol = {dt: solver.solve(model, s, rho0, 0.0, 0.2, dt).snapshots[-1] for dt in (4e-3, 2e-3, 1e-3)}
    e1 = np.abs(sol[4e-3] - sol[1e-3]).max()
    e2 = np.abs(sol[2e-3] - sol[1e-3]).max()
    # errors measured against the finest run: (4^2 - 1) / (2^2 - 1) = 5 for order two
    assert 4.0 < e1 / e2 < 6.0


def test_mass_balance():
    model = torus(32, dim=2)
    paired = spec(model, {"name": "gradient_sine", "amplitude": 0.3, "wave": [1, 1]},
                  {"name": "divergence_of_drift"})
    x, y = model.grid.coords
    traj = solver.solve(model, paired, 1.5 + np.cos(x) * np.cos(y), 0.0, 0.5, 2e-3)
    assert np.abs(traj.mass / traj.mass[0] - 1).max() < 1e-8
    assert solver.mass_balance_check(traj, paired) < 1e-6
    model, s, rho0 = generic_case()
    traj = solver.solve(model, s, rho0, 0.0, 0.5, 1e-3)
    assert abs(traj.mass[-1] - traj.mass[0]) > 1e-3  # the generic case does change mass
    assert solver.mass_balance_check(traj, s) < 1e-6
    heat = solver.solve(model, spec(model), rho0, 0.0, 0.5, 1e-2)
    assert np.abs(heat.mass - heat.mass[0]).max() < 1e-10


def test_stability_bound_reduces_dt_with_warning():
    model, s, rho0 = generic_case()
    bound = solver.stability_bound(model.grid, s)
    h = model.grid.spacing[0]
    assert bound == pytest.approx(min(h * h, h / (4 * 0.5 * math.sqrt(2)), 1 / (4 * 0.4)), rel=1e-6)
    with pytest.warns(RuntimeWarning, match="stability bound"):
        traj = solver.solve(model, s, rho0, 0.0, 0.1, 0.05)
    assert traj.dt <= bound


def test_snapshot_budget():
    model = torus(16)
    traj = solver.solve(model, spec(model), np.ones(16), 0.0, 1.0, 1e-3)
    assert len(traj) <= solver.DEFAULT_MAX_SNAPSHOTS + 1
    assert traj.times[-1] == pytest.approx(1.0)
    strided = solver.solve(model, spec(model), np.ones(16), 0.0, 0.1, 1e-3, stride=10)
    assert len(strided) == 11


def test_positivity_loss_aborts(monkeypatch):
    model = torus(32)
    x = model.grid.coords[0]
    s = spec(model, {"name": "constant", "vector": [40.0]})
    monkeypatch.setattr(solver, "stability_bound", lambda grid, spec: 1.0)
    with pytest.raises(solver.SolverAbort) as info:
        solver.solve(model, s, 1 + 0.99 * np.cos(3 * x), 0.0, 5.0, 0.2)
    assert info.value.time > 0


def test_invalid_inputs():
    model = torus(16)
    s = spec(model)
    with pytest.raises(ValueError):
        solver.solve(model, s, np.zeros(16), 0.0, 1.0, 0.01)
    with pytest.raises(ValueError):
        solver.solve(model, s, np.ones(16), 1.0, 0.5, 0.01)
    with pytest.raises(ValueError):
        solver.solve(model, s, np.ones(16), 0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        solver.solve(model, s, np.full(16, np.nan), 0.0, 1.0, 0.01)
    with pytest.raises(TypeError):
        solver.solve(geo.Sphere2(), s, np.ones(16), 0.0, 1.0, 0.01)


def test_agreement_with_finite_difference_oracle():
    model, s, rho0 = generic_case(64)
    spectral = solver.solve(model, s, rho0, 0.0, 0.5, 1e-3).snapshots[-1]
    fd, dt_fd = solver.fd_solve(model, s, rho0, 0.0, 0.5)
    h = model.grid.spacing[0]
    diff = np.abs(fd - spectral).max()
    assert diff / (np.abs(spectral).max() * (h * h + dt_fd)) <= 10
    # and the finite-difference error genuinely shrinks with h
    coarse_model, coarse_s, coarse_rho0 = generic_case(32)
    fd_c, _ = solver.fd_solve(coarse_model, coarse_s, coarse_rho0, 0.0, 0.5)
    assert np.abs(fd_c - spectral[::2, ::2]).max() > 2 * diff
