import json
import math

import pytest

from harnacklab import cli


def small_pde_config(**over):
    cfg = {
        "name": "small",
        "model": {"variant": "flat_torus", "dim": 2, "period": 2 * math.pi, "points": 16},
        "drift": {"name": "gradient_sine", "amplitude": 0.3},
        "potential": {"name": "cosine", "amplitude": 0.2, "wave": [0, 1]},
        "initial": {"kind": "single_mode", "offset": 1.5, "amplitude": 1.0, "wave": [1, 1]},
        "time": {"t_start": 0.0, "t_end": 0.3, "dt": 0.002, "t_min": 0.05},
        "verify": ["matrix", "mass_balance"],
    }
    cfg.update(over)
    return cfg


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_list_scenarios(capsys):
    assert cli.main(["list-scenarios"]) == 0
    out = capsys.readouterr().out
    for name in ("hamilton_gaussian", "cao_ni_gaussian", "honesty_undersized_k", "mass_pairing"):
        assert name in out


def test_run_writes_reports(tmp_path):
    out = tmp_path / "out"
    code = cli.main(["run", "--config", write(tmp_path, small_pde_config()), "--out", str(out)])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["schema_version"] == cli.SCHEMA_VERSION
    assert summary["pass"] is True and summary["exit_code"] == 0
    m = summary["checks"]["matrix"]
    assert m["global_min_margin"] >= -1e-3
    assert "discretization_error" in m
    # every constant used in a decision is reported
    assert m["k"] == summary["constants"]["used"]["k"] > 0
    assert summary["constants"]["source"]["k"] == "auto"
    assert (out / "margins_matrix.csv").read_text().startswith("t,min_margin,argmin_x0,argmin_x1")
    assert any(p.name.startswith("fields_") for p in out.iterdir())


def test_reports_are_deterministic(tmp_path):
    path = write(tmp_path, small_pde_config())
    cli.main(["run", "--config", path, "--out", str(tmp_path / "a")])
    cli.main(["run", "--config", path, "--out", str(tmp_path / "b")])
    files_a = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files_a == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files_a:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("mutate, field", [
    (lambda c: c["time"].update(dt=-1), "time.dt"),
    (lambda c: c["time"].update(t_end=-0.5), "time"),
    (lambda c: c["model"].update(points=7), "model.points"),
    (lambda c: c["model"].update(variant="klein_bottle"), "model.variant"),
    (lambda c: c.update(verify=["matrix", "bogus"]), "verify"),
    (lambda c: c.update(drift={"name": "nope"}), "drift"),
    (lambda c: c["initial"].update(kind="mystery"), "initial.kind"),
    (lambda c: c.update(constants={"policy": "guess"}), "constants.policy"),
])
def test_config_errors_name_the_field(tmp_path, capsys, mutate, field):
    cfg = small_pde_config()
    mutate(cfg)
    assert cli.main(["run", "--config", write(tmp_path, cfg)]) == 2
    assert field in capsys.readouterr().err


def test_unreadable_config(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert cli.main(["run", "--config", str(tmp_path / "bad.json")]) == 2
    assert cli.main(["run", "--scenario", "no_such_scenario"]) == 2
    assert "--config" in capsys.readouterr().err


def test_validate_rejects_non_mapping():
    with pytest.raises(cli.ConfigError):
        cli.validate([1, 2, 3])


def test_scenario_reference_with_deep_overrides(tmp_path):
    cfg = {"scenario": "mass_pairing", "time": {"t_end": 0.1}, "model": {"points": 16}}
    out = tmp_path / "o"
    assert cli.main(["run", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["time"]["t_end"] == pytest.approx(0.1)
    assert summary["time"]["t_start"] == 0.0  # untouched keys of the section survive
    assert summary["model"]["points"] == [16, 16]


def test_merge_config_is_recursive():
    base = {"a": {"b": 1, "c": 2}, "d": [1]}
    merged = cli.merge_config(base, {"a": {"c": 5}, "d": [2]})
    assert merged == {"a": {"b": 1, "c": 5}, "d": [2]}
    assert base == {"a": {"b": 1, "c": 2}, "d": [1]}


def test_failed_check_exits_one(tmp_path):
    cfg = small_pde_config(constants={"policy": "user", "k": 0.0}, override=True, refinement=False)
    cfg["potential"] = {"name": "cosine", "amplitude": 1.0, "wave": [0, 1]}
    cfg["drift"] = {"name": "zero"}
    cfg["initial"] = {"kind": "constant", "value": 1.0}
    cfg["time"].update(t_end=3.0, dt=0.01)
    out = tmp_path / "o"
    assert cli.main(["run", "--config", write(tmp_path, cfg), "--out", str(out)]) == 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["checks"]["matrix"]["global_min_margin"] < 0
    assert summary["constants"]["override"] is True


def test_hypothesis_gate_blocks_inapplicable_theorem():
    cfg = small_pde_config(drift={"name": "shear_sine", "amplitude": 0.5}, refinement=False)
    res = cli.run_config(cfg)
    assert res.exit_code == 1
    assert res.summary["checks"]["matrix"]["pass"] is False
    assert "hypothes" in res.summary["checks"]["matrix"]["reason"]


def test_solver_abort_exits_three(tmp_path):
    cfg = small_pde_config(verify=["mass_balance"])
    cfg["model"].update(period=20.0, points=64, dim=1)
    cfg["drift"] = {"name": "zero"}
    cfg["potential"] = {"name": "zero"}
    cfg["initial"] = {"kind": "heat_kernel_seed", "center": [10.0], "t0": 0.01}
    cfg["time"] = {"t_start": 0.01, "t_end": 0.1, "dt": 0.001}
    assert cli.main(["run", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 3
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["error"]["kind"] == "solver_abort"


def test_tolerance_and_grid_override_flags(tmp_path):
    out = tmp_path / "o"
    code = cli.main(["run", "--config", write(tmp_path, small_pde_config()), "--out", str(out),
                     "--tolerance", "0.25", "--grid-override", "24"])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["checks"]["matrix"]["tolerance"] == 0.25
    assert summary["model"]["points"] == [24, 24]


def test_sweep_lambda(tmp_path, capsys):
    cfg = {"scenario": "scalar_rotational", "model": {"points": 16}, "time": {"t_end": 0.3}}
    code = cli.main(["sweep", "--config", write(tmp_path, cfg), "--parameter", "constants.lambda",
                     "--values", "0.25,0.5,1.0", "--out", str(tmp_path / "s")])
    assert code == 0
    lines = (tmp_path / "s" / "sweep.csv").read_text().strip().splitlines()
    assert lines[0].startswith("constants.lambda,exit_code,pass")
    assert len(lines) == 4
    assert all(",0,True" in line for line in lines[1:])


def test_sweep_empty_values(tmp_path):
    path = write(tmp_path, small_pde_config())
    assert cli.main(["sweep", "--config", path, "--parameter", "constants.lambda", "--values", ","]) == 2
    with pytest.raises(cli.ConfigError):
        cli.sweep(small_pde_config(), "constants.lambda", [])


def test_sweep_grid_refinement_converges():
    """Discretisation-error estimates shrink with m until round-off."""
    cfg = cli.scenario("matrix_potential")
    cfg["time"]["t_end"] = 0.5
    cfg["verify"] = ["matrix"]
    rows, _ = cli.sweep(cfg, "model.points", [16, 32, 64])
    errs = [r["matrix_discretization_error"] for r in rows]
    assert all(r["pass"] for r in rows)
    assert errs[0] >= errs[1] >= errs[2]
    assert errs[2] < 1e-6


def test_sweep_spectral_grids_are_converged():
    """On a resolved heat-kernel seed every grid in {64, 128, 256} is already at round-off."""
    cfg = cli.scenario("li_yau_gaussian")
    cfg["initial"].update(t0=0.25, floor=1e-8)
    cfg["time"]["t_start"] = 0.25
    rows, table = cli.sweep(cfg, "model.points", [64, 128, 256])
    assert [r["exit_code"] for r in rows] == [0, 0, 0]
    assert max(r["li_yau_discretization_error"] for r in rows) < 1e-10
    margins = [r["li_yau_global_min"] for r in rows]
    assert max(margins) - min(margins) < 1e-10
    assert table.splitlines()[0].startswith("model.points,")


def test_hypotheses_command(tmp_path):
    out = tmp_path / "h"
    cfg = {"scenario": "scalar_rotational", "model": {"points": 16}}
    assert cli.main(["hypotheses", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["checks"]["refinement"]["pass"] is True
    assert summary["hypotheses"]["lambda"] == 0.5 and summary["hypotheses"]["k1"] is not None


def test_geometry_tests_command(tmp_path):
    out = tmp_path / "g"
    assert cli.main(["geometry-tests", "--out", str(out)]) == 0
    geo = json.loads((out / "summary.json").read_text())["checks"]["geometry"]
    assert geo["pass"] is True


def test_frames_command_requires_frames_check(tmp_path, capsys):
    assert cli.main(["frames", "--config", write(tmp_path, small_pde_config())]) == 2
    assert "verify" in capsys.readouterr().err


def test_frames_command(tmp_path):
    cfg = {"scenario": "frames_rotational", "model": {"points": 16},
           "time": {"t_end": 0.06}, "frames": {"dt_levels": [2e-3, 1e-3]}}
    out = tmp_path / "f"
    assert cli.main(["frames", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
    csv = (out / "frames_x0_dt1.csv").read_text().splitlines()
    assert csv[0] == "t,residual_bochner,residual_eqY,orthonormality_drift"


def test_fd_oracle_and_mass_balance_scenario():
    res = cli.run_config(cli.merge_config(cli.scenario("mass_pairing"), {"model": {"points": 32}}))
    assert res.exit_code == 0
    assert res.summary["checks"]["fd_oracle"]["constant"] <= 10
    assert res.summary["checks"]["mass_balance"]["residual"] <= 1e-6


def test_lambda_optimisation_policy():
    cfg = cli.merge_config(cli.scenario("scalar_rotational"),
                           {"model": {"points": 16}, "time": {"t_end": 0.3},
                            "constants": {"lambda": "optimize", "optimize_at": 1.0}})
    res = cli.run_config(cfg)
    cons = res.summary["constants"]
    assert cons["source"]["lambda"] == "optimized"
    lam = cons["used"]["lambda"]
    assert lam == pytest.approx(cli.ver.optimize_lambda(cli.build_setup(cli.validate(cfg)).derived, 1.0))
    assert res.exit_code == 0
    user = cli.run_config(cli.merge_config(cfg, {"constants": {"lambda": 0.5}}))
    assert user.summary["constants"]["source"]["lambda"] == "user"
    with pytest.raises(cli.ConfigError, match="constants.lambda"):
        cli.validate(cli.merge_config(cfg, {"constants": {"lambda": "optimize", "policy": "user"}}))
