import json

import pytest

from fbdsde.cli import main

SMALL = """[ensemble]
seed = 3
n_outer = 4
n_inner = 100

[grid]
T = 1.0
n_steps = 8
"""


def _cfg(tmp_path, extra=""):
    p = tmp_path / "run.toml"
    p.write_text(SMALL + extra)
    return str(p)


def _report(out):
    return json.loads((out / "report.json").read_text())


def test_simulate_writes_report_and_config(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["simulate", "--config", _cfg(tmp_path, "[output]\nwrite_paths = true\n"), "--out", str(out)]) == 0
    rep = _report(out)
    assert rep["schema_version"] == 1 and rep["command"] == "simulate" and rep["seed"] == 3 and rep["pass"]
    assert {"path_means.csv", "increments.csv"} <= set(rep["artifacts"])
    for s in rep["stages"]:
        assert set(s) >= {"stage", "pass", "metric", "value", "tolerance", "se", "note"}
    assert (out / "config.toml").exists()
    assert "PASS simulate" in capsys.readouterr().out


def test_seed_override_reaches_report(tmp_path):
    out = tmp_path / "o"
    main(["simulate", "--config", _cfg(tmp_path), "--out", str(out), "--seed", "0xff"])
    assert _report(out)["seed"] == 255


def test_invalid_config_exits_2_before_computing(tmp_path, capsys):
    out = tmp_path / "o"
    bad = tmp_path / "bad.toml"
    bad.write_text(SMALL.replace("n_inner = 100", "n_inner = 0"))
    assert main(["solve", "--config", str(bad), "--out", str(out)]) == 2
    assert not out.exists()
    assert "configuration error" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")]) == 2


def test_field_rejects_coupled_model(tmp_path):
    assert main(["field", "--config", _cfg(tmp_path), "--out", str(tmp_path / "o")]) == 2


def test_verify_mp_failure_still_writes_report(tmp_path):
    out = tmp_path / "o"
    code = main(["verify-mp", "--config", _cfg(tmp_path, "[control]\nvalue = 0.5\n"), "--out", str(out)])
    assert code == 1
    rep = _report(out)
    assert not rep["pass"]
    assert any(s["stage"] == "mp_residual" and s["pass"] is False for s in rep["stages"])
    assert (out / "mp_residual.csv").exists()


def test_solve_and_adjoint_at_optimum(tmp_path):
    out = tmp_path / "o"
    assert main(["adjoint", "--config", _cfg(tmp_path), "--out", str(out)]) == 0
    names = {s["stage"] for s in _report(out)["stages"]}
    assert {"state_solve", "adjoint_solve", "duality"} <= names
    assert (out / "adjoint_means.csv").read_text().startswith("scenario,step,t,")


def test_heat_field(tmp_path):
    out = tmp_path / "o"
    extra = '[model]\nname = "heat"\n[field]\ntimes = [0.5, 1.0]\nn_points = 3\n'
    assert main(["field", "--config", _cfg(tmp_path, extra), "--out", str(out)]) == 0
    assert len((out / "field.csv").read_text().splitlines()) == 1 + 4 * 2 * 3


@pytest.mark.parametrize("argv", [["simulate"], ["simulate", "--config", "x", "--threads", "0"],
                                  ["simulate", "--config", "x", "--seed", "-1"], ["benchmark", "--config", "x", "heat"]])
def test_argument_errors(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2
