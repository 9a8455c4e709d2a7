import json
import subprocess
import sys

import pytest

from hybridyn.cli import ConfigError, load_config, main


@pytest.fixture(autouse=True)
def one_worker(monkeypatch):
    monkeypatch.setenv("HYBRIDYN_WORKERS", "1")


def run(tmp_path, *args):
    return main(list(args) + ["--out", str(tmp_path / "out")])


def test_simulate_row_count(tmp_path):
    assert run(tmp_path, "simulate", "--scenario", "dephasing_qubit", "--dt", "1e-4", "--T", "1", "--seed", "7") == 0
    lines = (tmp_path / "out" / "trajectory.csv").read_text().splitlines()
    assert len(lines) - 1 == 10001
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["config"]["dt"] == 1e-4
    assert manifest["manifest_version"] == 1 and "version" in manifest


def test_replay_is_bit_exact(tmp_path):
    assert run(tmp_path, "simulate", "--scenario", "hybrid_linear", "--dt", "1e-3", "--T", "0.2", "--seed", "3") == 0
    out = tmp_path / "out"
    assert main(["replay", str(out / "manifest.json"), "--out", str(tmp_path / "again")]) == 0
    assert (out / "trajectory.csv").read_bytes() == (tmp_path / "again" / "trajectory.csv").read_bytes()


def test_unknown_scenario_is_usage_error(tmp_path, capsys):
    assert run(tmp_path, "simulate", "--scenario", "nope") == 2
    err = capsys.readouterr().err
    assert "usage" in err and "nope" in err


def test_unknown_flag_is_usage_error(tmp_path):
    assert run(tmp_path, "simulate", "--scenario", "dephasing_qubit", "--bogus", "1") == 2


def test_missing_subcommand():
    assert main([]) == 2


def test_config_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"subcommand": "ensemble", "scenario": "dephasing_qubit"}))
    cfg = load_config(path)
    assert (cfg.dt, cfg.T, cfg.N, cfg.seed) == (1e-4, 1.0, 1000, 0)


def test_config_unknown_key_named(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"subcommand": "simulate", "scenario": "dephasing_qubit", "dtt": 1}))
    with pytest.raises(ConfigError, match="'dtt'"):
        load_config(path)
    assert main(["simulate", "--config", str(path)]) == 2


def test_config_malformed_reports_line(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text('{"scenario": "dephasing_qubit",\n "dt": }')
    assert main(["simulate", "--config", str(path)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_config_invalid_value(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"scenario": "dephasing_qubit", "dt": -1}))
    with pytest.raises(ConfigError, match="dt"):
        load_config(path, "simulate")


def test_flag_overrides_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"scenario": "dephasing_qubit", "dt": 1e-2, "T": 0.1}))
    assert main(["simulate", "--config", str(path), "--dt", "1e-3", "--out", str(tmp_path / "o")]) == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["dt"] == 1e-3
    assert len((tmp_path / "o" / "trajectory.csv").read_text().splitlines()) == 102


def test_validate_tradeoff_saturated(tmp_path, capsys):
    params = tmp_path / "p.json"
    params.write_text(json.dumps({
        "Gamma": {"re": [[1.0, 0.0], [0.0, 1.0]], "im": [[0.0, 0.5], [0.0, 0.0]]},
        "eta": [1.0, 1.0],
        "G": [[2.0, 0.0], [0.0, 1.0]],
        "L": [[[1, 0], [0, -1]], [[0, 1], [1, 0]]],
    }))
    assert run(tmp_path, "validate-tradeoff", "--input", str(params)) == 0
    out = capsys.readouterr().out
    assert "saturated: true" in out


def test_validate_tradeoff_lossy(tmp_path, capsys):
    params = tmp_path / "p.json"
    params.write_text(json.dumps({"Gamma": [[1.0]], "eta": [0.5], "G": [[2.0]]}))
    assert run(tmp_path, "validate-tradeoff", "--input", str(params)) == 0
    assert "saturated: false" in capsys.readouterr().out


def test_validate_tradeoff_bad_input(tmp_path):
    params = tmp_path / "p.json"
    params.write_text(json.dumps({"Gamma": [[1.0]], "eta": [0.5]}))
    assert run(tmp_path, "validate-tradeoff", "--input", str(params)) == 2


def test_ensemble_writes_reports(tmp_path):
    code = run(tmp_path, "ensemble", "--scenario", "dephasing_qubit", "--N", "300", "--dt", "1e-3",
               "--snapshots", "0.5,1")
    assert code == 0
    out = tmp_path / "out"
    rep = json.loads((out / "comparison.json").read_text())
    assert rep["passed"] and len(rep["rows"]) == 2
    assert json.loads((out / "stats.json").read_text())["n"] == 300


def test_pde_and_lindblad(tmp_path):
    assert run(tmp_path, "pde", "--scenario", "hybrid_linear", "--T", "0.05", "--dz", "0.1") == 0
    assert (tmp_path / "out" / "field.csv").exists()
    assert run(tmp_path, "lindblad", "--scenario", "markovian_feedback_qubit", "--dt", "1e-3",
               "--generator", "exact-average") == 0
    header = (tmp_path / "out" / "lindblad.csv").read_text().splitlines()[0]
    assert "purity" in header and "sz" in header


def test_pde_rejects_quantum_only_scenario(tmp_path):
    assert run(tmp_path, "pde", "--scenario", "dephasing_qubit") == 2


def test_ito_selftest_and_born(tmp_path):
    assert run(tmp_path, "ito-selftest", "--N", "500", "--dt", "1e-3") == 0
    assert run(tmp_path, "born", "--N", "300", "--dt", "1e-3", "--T", "5") == 0


def test_xcheck_hybrid_linear(tmp_path, capsys):
    code = run(tmp_path, "xcheck", "--scenario", "hybrid_linear", "--N", "400", "--dt", "1e-3",
               "--T", "0.3", "--snapshots", "0.3", "--dz", "0.05")
    assert code == 0
    report = json.loads((tmp_path / "out" / "xcheck.json").read_text())
    assert report["passed"] and "skipped" in report["master_equation"]


def test_xcheck_z_independent_runs_master_equation(tmp_path):
    code = run(tmp_path, "xcheck", "--scenario", "open_qbm", "--N", "400", "--dt", "1e-3",
               "--T", "0.3", "--dz", "0.05")
    assert code == 0
    report = json.loads((tmp_path / "out" / "xcheck.json").read_text())
    assert len(report["reports"]) == 3


def test_ensemble_failure_exit_code(tmp_path):
    # half-efficiency feedback: the literal generator does not average the kicks
    code = run(tmp_path, "ensemble", "--scenario", "markovian_feedback_qubit", "--param", "eta=0.5",
               "--N", "2000", "--dt", "1e-3", "--T", "1")
    assert code == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hybridyn", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "hybridyn" in proc.stdout
