from __future__ import annotations

import json

import numpy as np
import pytest

from h1delay.cli import main
from h1delay.grid_function import from_csv, make

LAGGED = {
    "n": 1,
    "h": 1.0,
    "T": 2.0,
    "dt": 0.02,
    "rhs": "delayed_decay",
    "delay": {"tag": "constant", "params": {"tau0": -1.0}},
    "phi": {"constant": 1.0},
}


def write_config(tmp_path, config, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return str(path)


def test_solve_writes_solution_and_report(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["solve", write_config(tmp_path, LAGGED), "--out", str(out)]) == 0
    sol = from_csv((out / "solution.csv").read_text())
    assert sol.eval(2.0)[0] == pytest.approx(-0.5, abs=1e-9)
    report = json.loads((out / "report.json").read_text())
    assert report["status"] == "Complete"
    assert set(report) >= {"status", "solved_T", "beta_trace", "rho", "ratios", "residual_sup", "apriori_margin"}
    assert "Complete" in capsys.readouterr().out


def test_solve_reports_are_byte_identical(tmp_path):
    cfg = write_config(tmp_path, LAGGED)
    assert main(["solve", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["solve", cfg, "--out", str(tmp_path / "b")]) == 0
    for name in ("solution.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    leftovers = [p for p in (tmp_path / "a").iterdir() if p.name.endswith(".tmp")]
    assert not leftovers


def test_solve_blowup_exit_code(tmp_path):
    cfg = dict(LAGGED, rhs="growth", T=3.0, opts={"beta_max": 2.0})
    assert main(["solve", write_config(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["status"] == "LipschitzBlowup"


def test_solve_affine_and_table_rhs(tmp_path):
    affine = dict(LAGGED, rhs={"type": "affine", "B": [[-1.0]], "c": [0.0]})
    assert main(["solve", write_config(tmp_path, affine, "a.json"), "--out", str(tmp_path / "a")]) == 0
    table = dict(LAGGED, rhs={"type": "table", "B": [[-1.0]], "t": [0.0, 2.0], "f": [[0.0], [0.0]]})
    assert main(["solve", write_config(tmp_path, table, "t.json"), "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "a" / "solution.csv").read_text() == (tmp_path / "t" / "solution.csv").read_text()


def test_solve_phi_from_csv_and_inline(tmp_path):
    phi = make(-1.0, 0.0, 0.1, np.ones((11, 1)))
    (tmp_path / "phi.csv").write_text(phi.to_csv())
    a = dict(LAGGED, phi={"csv": "phi.csv"})
    b = dict(LAGGED, phi={"values": [1.0] * 11, "dt": 0.1})
    assert main(["solve", write_config(tmp_path, a, "a.json"), "--out", str(tmp_path / "a")]) == 0
    assert main(["solve", write_config(tmp_path, b, "b.json"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "solution.csv").read_text() == (tmp_path / "b" / "solution.csv").read_text()


def test_solve_fde_biology(tmp_path):
    cfg = {"kind": "fde", "n": 2, "h": 1.0, "T": 0.5, "dt": 0.05, "rhs": "biology", "phi": {"constant": [1.0, 0.5]}}
    assert main(["solve", write_config(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 0


@pytest.mark.parametrize(
    "patch, field",
    [
        ({"bogus": 1}, "bogus"),
        ({"dt": -0.1}, "dt"),
        ({"dt": 0.03}, "dt"),
        ({"rhs": "nonsense"}, "rhs.name"),
        ({"rhs": {"type": "affine", "A": [[1.0, 2.0]]}}, "rhs.A"),
        ({"delay": {"tag": "constant", "params": {"tau0": -1.0, "x": 2}}}, "delay.params.x"),
        ({"phi": {"constant": 1.0, "dt": 0.1}}, "phi.dt"),
        ({"opts": {"target_q": 1.5}}, "opts.target_q"),
        ({"opts": {"speed": 3}}, "opts.speed"),
        ({"L_g": 0.5}, "L_g"),
    ],
)
def test_solve_config_errors_name_the_field(tmp_path, capsys, patch, field):
    cfg = dict(LAGGED, **patch)
    assert main(["solve", write_config(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert err.startswith(f"error: {field}:")
    assert not (tmp_path / "o").exists()


def test_solve_missing_file(tmp_path, capsys):
    assert main(["solve", str(tmp_path / "missing.cfg")]) == 1
    assert "config" in capsys.readouterr().err


def test_solve_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert main(["solve", str(path)]) == 1


def test_project_vbeta(tmp_path, capsys):
    t = np.linspace(-1.0, 0.0, 21)
    (tmp_path / "w.csv").write_text(make(-1.0, 0.0, 0.05, np.sin(6 * t)[:, None]).to_csv())
    out = tmp_path / "p.csv"
    assert main(["project", "--input", str(tmp_path / "w.csv"), "--beta", "1", "--output", str(out)]) == 0
    line = json.loads(capsys.readouterr().out.strip())
    assert line["set"] == "V_beta" and line["kkt_residual"] < 1e-9
    proj = from_csv(out.read_text())
    assert np.max(np.abs(np.diff(proj.values[:, 0]))) / 0.05 <= 1.0 + 1e-9


def test_project_walpha(tmp_path, capsys):
    t = np.linspace(-1.0, 0.0, 21)
    (tmp_path / "w.csv").write_text(make(-1.0, 0.0, 0.05, 3 * np.sin(6 * t)[:, None]).to_csv())
    args = ["project", "--input", str(tmp_path / "w.csv"), "--output", str(tmp_path / "p.csv")]
    assert main(args + ["--alpha", "0.1", "--w", "1", "--wplus", "1", "--c", "4"]) == 0
    assert json.loads(capsys.readouterr().out)["set"] == "W_alpha"
    proj = from_csv((tmp_path / "p.csv").read_text()).values[:, 0]
    assert proj.min() >= -0.9 - 1e-9 and proj.max() <= 0.9 + 1e-9
    assert main(args + ["--alpha", "0.1"]) == 1
    assert main(args + ["--alpha", "0.1", "--w", "1", "--wplus", "1", "--c", "2"]) == 1
    assert main(args + ["--alpha", "5", "--w", "1", "--wplus", "1", "--c", "4"]) == 1


def test_scenario_counterexample(tmp_path, capsys):
    assert main(["scenario", "counterexample", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "PASS x1_residual" in out and "PASS x2_residual" in out
    report = json.loads((tmp_path / "counterexample_report.json").read_text())
    assert report["pass"]
    assert (tmp_path / "counterexample_dt0.01.csv").exists()


def test_usage_errors():
    assert main([]) == 1
    assert main(["scenario", "nonexistent"]) == 1
    assert main(["verify", "--trials", "many"]) == 1


def test_verify_small(tmp_path):
    assert main(["verify", "--trials", "20", "--seed", "3", "--out", str(tmp_path)]) == 0
    first = (tmp_path / "verify.json").read_bytes()
    assert main(["verify", "--trials", "20", "--seed", "3", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "verify.json").read_bytes() == first
    assert json.loads(first)["pass"]
