"""Exit codes, CSV artifacts, and manifest content of the command line."""

import csv
import json
import os

import numpy as np
import pytest

from mflq import cli, population

CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def config_path(name):
    return os.path.join(CONFIG_DIR, name)


def run_cli(argv):
    return cli.main(argv)


def read_manifest(out_dir):
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as fh:
        return json.load(fh)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_validate_accepts_shipped_configs(capsys):
    for name in ("scalar.json", "k2.json", "decoupled.json"):
        rc = run_cli(["validate", "--config", config_path(name)])
        assert rc == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "validation: pass" in out


def test_validate_flags_indefinite_control_weight(tmp_path, capsys):
    cfg = json.load(open(config_path("scalar.json")))
    cfg["types"][0]["R"] = [[-1.0]]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(cfg))
    rc = run_cli(["validate", "--config", str(bad)])
    assert rc == cli.EXIT_ASSUMPTION
    out = capsys.readouterr().out
    assert "R_not_pd" in out


def test_malformed_json_is_a_parse_error(tmp_path, capsys):
    broken = tmp_path / "broken.json"
    broken.write_text("{ this is not json")
    rc = run_cli(["validate", "--config", str(broken)])
    assert rc == cli.EXIT_PARSE
    err = capsys.readouterr().err
    assert "config error:" in err


def test_population_split_guard_and_override(tmp_path, capsys):
    out = tmp_path / "run"
    argv = ["simulate", "--config", config_path("k2.json"),
            "--out", str(out), "--N", "5", "--paths", "4"]
    rc = run_cli(argv)
    assert rc == cli.EXIT_ASSUMPTION
    assert "does not split" in capsys.readouterr().err
    rc = run_cli(argv + ["--allow-epsN"])
    assert rc == cli.EXIT_OK


def test_exponential_method_needs_special_structure(tmp_path, capsys):
    rc = run_cli(["solve-mf", "--config", config_path("k2.json"),
                  "--out", str(tmp_path / "mf"),
                  "--riccati-method", "exponential"])
    assert rc == cli.EXIT_RICCATI
    assert "decoupling failure:" in capsys.readouterr().err


def test_simulation_blowup_maps_to_exit_five(tmp_path, monkeypatch, capsys):
    def boom(*args, **kwargs):
        raise population.SimulationError("non-finite state")

    monkeypatch.setattr(cli.population, "simulate_population", boom)
    rc = run_cli(["simulate", "--config", config_path("scalar.json"),
                  "--out", str(tmp_path / "run"), "--paths", "2"])
    assert rc == cli.EXIT_SIMULATION
    assert "simulation failure:" in capsys.readouterr().err


def test_oracle_bounds_exit_six(tmp_path, capsys):
    rc = run_cli(["oracle-compare", "--config", config_path("k2.json"),
                  "--out", str(tmp_path / "cmp"), "--paths", "8"])
    assert rc == cli.EXIT_ORACLE
    assert "oracle bounds:" in capsys.readouterr().err


def test_bad_n_list_is_an_assumption_error(tmp_path, capsys):
    rc = run_cli(["converge", "--config", config_path("k2.json"),
                  "--out", str(tmp_path / "conv"), "--N-list", "a,b"])
    assert rc == cli.EXIT_ASSUMPTION
    assert "bad N list" in capsys.readouterr().err


def test_solve_mf_artifacts(tmp_path):
    out = tmp_path / "mf"
    rc = run_cli(["solve-mf", "--config", config_path("decoupled.json"),
                  "--out", str(out)])
    assert rc == cli.EXIT_OK
    rows = read_rows(out / "meanfield.csv")
    assert rows and all(float(r["Theta_1"]) == 0.0 for r in rows)
    ric = read_rows(out / "riccati.csv")
    assert list(ric[0]) == ["node", "t", "pivot_margin"]
    manifest = read_manifest(out)
    assert manifest["command"] == "solve-mf"
    assert sorted(manifest["outputs"]) == ["meanfield.csv", "riccati.csv"]
    assert len(manifest["config_sha256"]) == 64
    assert manifest["results"]["fixed_point_residual"] <= 1e-6


def test_simulate_is_deterministic_per_seed(tmp_path):
    blobs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        rc = run_cli(["simulate", "--config", config_path("scalar.json"),
                      "--out", str(out), "--paths", "32", "--seed", "3"])
        assert rc == cli.EXIT_OK
        blobs.append(((out / "cost.csv").read_bytes(),
                      (out / "trajectory.csv").read_bytes()))
    assert blobs[0] == blobs[1]


def test_thread_count_never_changes_csv_bytes(tmp_path, monkeypatch):
    monkeypatch.setattr(population, "MAX_CHUNK_STATES", 8)
    blobs = []
    for tag, threads in (("one", None), ("three", "3")):
        if threads is None:
            monkeypatch.delenv(population.THREADS_ENV, raising=False)
        else:
            monkeypatch.setenv(population.THREADS_ENV, threads)
        out = tmp_path / tag
        rc = run_cli(["simulate", "--config", config_path("k2.json"),
                      "--out", str(out), "--paths", "16", "--seed", "1"])
        assert rc == cli.EXIT_OK
        blobs.append(((out / "cost.csv").read_bytes(),
                      (out / "trajectory.csv").read_bytes()))
    assert blobs[0] == blobs[1]


def test_zero_noise_run_reports_zero_stderr(tmp_path):
    out = tmp_path / "det"
    rc = run_cli(["simulate", "--config", config_path("nofluct.json"),
                  "--out", str(out), "--paths", "4"])
    assert rc == cli.EXIT_OK
    rows = read_rows(out / "cost.csv")
    assert len(rows) == 1
    assert float(rows[0]["stderr"]) == 0.0


def test_converge_rate_table_and_slopes(tmp_path):
    out = tmp_path / "conv"
    rc = run_cli(["converge", "--config", config_path("k2.json"),
                  "--out", str(out), "--N-list", "2,4",
                  "--paths", "40", "--seed", "1"])
    assert rc == cli.EXIT_OK
    rows = read_rows(out / "rate.csv")
    assert [int(r["N"]) for r in rows] == [2, 4]
    for row in rows:
        assert float(row["meanfield_error"]) > 0.0
        assert np.isfinite(float(row["max_gap"]))
    manifest = read_manifest(out)
    res = manifest["results"]
    assert res["slope_flag"] == "stochastic"
    assert res["meanfield_error_slope"] is not None
    assert manifest["N_sweep"] == [2, 4]


def test_converge_marks_deterministic_floor(tmp_path):
    out = tmp_path / "floor"
    rc = run_cli(["converge", "--config", config_path("nofluct.json"),
                  "--out", str(out), "--N-list", "2,4", "--paths", "4"])
    assert rc == cli.EXIT_OK
    manifest = read_manifest(out)
    assert manifest["results"]["slope_flag"] == "floor"


def test_oracle_compare_small_instance(tmp_path):
    out = tmp_path / "cmp"
    rc = run_cli(["oracle-compare", "--config", config_path("coupled_small.json"),
                  "--out", str(out), "--tree-steps", "4",
                  "--paths", "400", "--seed", "0"])
    assert rc == cli.EXIT_OK
    rows = read_rows(out / "oracle.csv")
    assert len(rows) == 1
    row = rows[0]
    assert int(row["N"]) == 2 and int(row["tree_steps"]) == 4
    gap = float(row["gap"])
    stderr = float(row["stderr"])
    assert gap >= -3.0 * stderr
    manifest = read_manifest(out)
    assert manifest["results"]["verdict"] == "PASS"
