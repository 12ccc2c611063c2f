import json

import numpy as np
import pandas as pd
import pytest

from homog_control import main

SMALL = {
    "mesh": {"d": 1, "nodes": 17},
    "time": {"T": 0.5, "M": 8},
    "solver": {"linear_method": "direct", "log_every": 1000},
}

TRACKING = dict(
    SMALL,
    problem={"u_T": {"kind": "sine", "time_poly": [1.0, 1.0]}, "N": 0.5},
)


def _run(tmp_path, command, config, *extra):
    path = tmp_path / f"{command}.json"
    path.write_text(json.dumps(config))
    out_dir = tmp_path / command
    code = main([command, "--config", str(path), "--out-dir", str(out_dir), "--quiet", *extra])
    return code, out_dir


def _summary(out_dir):
    return json.loads((out_dir / "summary.json").read_text())


def test_constants_n3(capsys):
    assert main(["constants", "--n", "3", "--c0", "1"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["gamma"] == 3.0
    assert printed["B"] == 1.0
    assert printed["A"] == pytest.approx(4.0 * np.pi)


def test_constants_rejects_n2():
    assert main(["constants", "--n", "2", "--c0", "1"]) == 2


def test_constants_n4(capsys):
    assert main(["constants", "--n", "4", "--c0", "0.5"]) == 0
    assert json.loads(capsys.readouterr().out)["B"] == 4.0


def test_cell_verify_passes(tmp_path):
    assert main(["cell-verify", "--n", "3", "--c0", "1", "--out-dir", str(tmp_path), "--quiet"]) == 0
    table = pd.read_csv(tmp_path / "cell_verify.csv")
    assert list(table["eps"]) == [0.1, 0.05, 0.025]
    assert table["A_relative_error"].iloc[-1] < 0.01
    assert _summary(tmp_path)["checks"]["radial_within_tol"]


def test_cell_verify_fails_tight_band(tmp_path):
    code = main(["cell-verify", "--band", "1e-4", "--nodes", "256", "--out-dir", str(tmp_path), "--quiet"])
    assert code == 3


def test_unknown_key_is_config_error(tmp_path):
    code, _ = _run(tmp_path, "solve-state", dict(SMALL, colour="red"))
    assert code == 2


def test_missing_config_file(tmp_path):
    assert main(["cost", "--config", str(tmp_path / "nope.json"), "--quiet"]) == 2


def test_zero_data_solve_state(tmp_path):
    code, out_dir = _run(tmp_path, "solve-state", SMALL)
    assert code == 0
    u = np.fromfile(out_dir / "field_u.bin", dtype="<f8")
    assert u.size == 9 * 15 and np.all(u == 0.0)
    assert (out_dir / "field_u_k8.csv").exists()
    summary = _summary(out_dir)
    assert summary["exit_code"] == 0
    assert "seconds" not in summary["state_report"]
    assert summary["stability_monitor"] == 0.0


def test_summary_bytes_are_reproducible(tmp_path):
    _, out_dir = _run(tmp_path, "cost", TRACKING)
    first = (out_dir / "summary.json").read_bytes()
    _, out_dir = _run(tmp_path, "cost", TRACKING)
    assert (out_dir / "summary.json").read_bytes() == first


def test_cost_reports_breakdown(tmp_path):
    code, out_dir = _run(tmp_path, "cost", TRACKING)
    assert code == 0
    cost = _summary(out_dir)["cost"]
    assert cost["term_final"] > 0 and cost["term_control"] == 0.0


def test_solve_adjoint_writes_both_adjoints(tmp_path):
    code, out_dir = _run(tmp_path, "solve-adjoint", TRACKING)
    assert code == 0
    assert (out_dir / "field_p.bin").exists() and (out_dir / "field_p_continuous.bin").exists()
    assert _summary(out_dir)["continuous_adjoint_gap"] >= 0.0


def test_fixed_point_with_cross_check(tmp_path):
    config = json.loads(json.dumps(TRACKING))
    config["solver"]["cross_check"] = True
    code, out_dir = _run(tmp_path, "fixed-point", config)
    assert code == 0
    summary = _summary(out_dir)
    assert summary["cross_check"]["relative_control_difference"] <= 1e-6
    iterations = pd.read_csv(out_dir / "iterations.csv")
    assert iterations["cost"].iloc[-1] <= iterations["cost"].iloc[0]


def test_fixed_point_iteration_cap_is_solver_failure(tmp_path):
    config = json.loads(json.dumps(TRACKING))
    config["solver"]["max_iter"] = 1
    code, out_dir = _run(tmp_path, "fixed-point", config)
    assert code == 4
    assert _summary(out_dir)["fixed_point"]["converged"] is False


def test_optimize(tmp_path):
    code, out_dir = _run(tmp_path, "optimize", TRACKING)
    assert code == 0
    assert _summary(out_dir)["optimize"]["optimality_residual"] <= 1e-8


def test_gradcheck(tmp_path):
    config = dict(TRACKING, gradcheck={"lambdas": [1e-2, 1e-3, 1e-4], "max_relative_error": 0.05})
    code, out_dir = _run(tmp_path, "gradcheck", config, "--seed", "3")
    assert code == 0
    table = pd.read_csv(out_dir / "gradcheck.csv")
    assert list(table.columns) == ["lambda", "finite_difference", "predicted", "relative_error"]


def test_kappa_sweep(tmp_path):
    config = dict(TRACKING, kappa_sweep={"kappas": [1.0, 10.0]})
    code, out_dir = _run(tmp_path, "kappa-sweep", config)
    assert code == 0
    table = pd.read_csv(out_dir / "kappa_sweep.csv")
    assert list(table["kappa"]) == [1.0, 10.0]


def test_mms(tmp_path):
    config = dict(
        SMALL,
        mesh={"d": 2, "nodes": 17},
        physics={"A": 1.0, "B": 1.0},
        mms={"levels": [17, 33, 65], "M0": 16, "time_nodes": 17, "time_steps": [16, 32, 64, 128]},
    )
    code, out_dir = _run(tmp_path, "mms", config)
    assert code == 0
    summary = _summary(out_dir)
    assert min(summary["space_orders"]) >= 1.9
    assert min(summary["time_orders"]) >= 0.9
    assert (out_dir / "mms_space.csv").exists() and (out_dir / "mms_time.csv").exists()


def test_identities(tmp_path):
    config = dict(SMALL, problem={"control": {"kind": "sine", "time_poly": [1.0, 1.0]}})
    code, out_dir = _run(tmp_path, "identities", config)
    assert code == 0
    rows = _summary(out_dir)["identities"]
    assert [row["dt"] for row in rows] == [0.0625, 0.03125, 0.015625]
