import csv
import json

import pytest

from diversefl import cli

from conftest import tiny_raw


def _write(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return p


def test_run_writes_artifacts(tmp_path):
    cfg = _write(tmp_path, tiny_raw())
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("rounds.csv", "summary.json", "manifest.json", "trace.dat"):
        assert (out / name).exists()
    rows = list(csv.reader((out / "rounds.csv").open()))
    assert len(rows) == 6
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 11 and len(manifest["config_hash"]) == 64


def test_run_is_byte_identical(tmp_path):
    cfg = _write(tmp_path, tiny_raw(num_faulty=2, faults={"kind": "gaussian"}))
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--workers", "2"])
    assert (tmp_path / "a" / "rounds.csv").read_bytes() == (tmp_path / "b" / "rounds.csv").read_bytes()


def test_seed_override_changes_run(tmp_path):
    cfg = _write(tmp_path, tiny_raw(num_faulty=2, faults={"kind": "gaussian"}))
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "99"])
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 99
    assert (tmp_path / "a" / "rounds.csv").read_bytes() != (tmp_path / "b" / "rounds.csv").read_bytes()


def test_env_out_dir(tmp_path, monkeypatch):
    cfg = _write(tmp_path, tiny_raw(rounds=1))
    monkeypatch.setenv("DIVERSEFL_OUT_DIR", str(tmp_path / "env"))
    assert cli.main(["run", "--config", str(cfg)]) == 0
    assert (tmp_path / "env" / "rounds.csv").exists()


def test_validation_error_names_f(tmp_path, capsys):
    cfg = _write(tmp_path, tiny_raw(num_faulty=40))
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "f:" in capsys.readouterr().err


def test_anomaly_exit_code(tmp_path):
    cfg = _write(tmp_path, tiny_raw(rounds=2, thresholds={"eps2": 50.0, "eps3": 60.0}))
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_sweep_f(tmp_path):
    cfg = _write(tmp_path, tiny_raw(rounds=2, num_clients=7, faults={"kind": "gaussian"}, rule="oracle"))
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(out), "--axis", "f", "--values", "1", "5"]) == 0
    rows = list(csv.DictReader((out / "comparison.csv").open()))
    assert [r["f"] for r in rows] == ["1", "5"]
    assert (out / "f=1" / "rounds.csv").exists() and (out / "f=5" / "rounds.csv").exists()


def test_sweep_rule_uses_identical_partition(tmp_path):
    cfg = _write(tmp_path, tiny_raw(rounds=2, num_faulty=1, faults={"kind": "sign_flip"}))
    out = tmp_path / "sweep"
    cli.main(["sweep", "--config", str(cfg), "--out", str(out), "--axis", "rule",
              "--values", "oracle", "median", "diversefl"])
    rows = list(csv.DictReader((out / "comparison.csv").open()))
    assert [r["rule"] for r in rows] == ["oracle", "median", "diversefl"]
    truths = {next(csv.DictReader((out / f"rule={r}" / "rounds.csv").open()))["faulty_ids"]
              for r in ("oracle", "median", "diversefl")}
    assert len(truths) == 1


def test_sweep_errors(tmp_path, capsys):
    cfg = _write(tmp_path, tiny_raw(rounds=1))
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s"), "--axis", "f"]) == 2
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s"), "--axis", "dataset",
                     "--values", "1"]) == 2
    assert "not a sweepable" in capsys.readouterr().err


BOUND = {"mu": 1.0, "L": 2.0, "sigma1": 1.0, "sigma2": 1.0, "gamma_1": 1.0, "gamma_2": 1.0,
         "beta": 0.1, "r": 1.0, "s": 1000, "d": 5, "N": 23, "delta_total": 0.1}


def test_bound_single_point(tmp_path, capsys):
    cfg = _write(tmp_path, {"bound": BOUND})
    assert cli.main(["bound", "--config", str(cfg)]) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert len(lines) == 2
    assert "NON-CONTRACTIVE" in lines[1]


def test_bound_grid_gamma1_decreasing_in_s():
    rows = cli.cmd_bound({"bound": {**BOUND, "s": [10, 100, 1000]}}, stream=open("/dev/null", "w"))
    g1 = [r["gamma1"] for r in rows]
    assert len(rows) == 3 and g1[0] > g1[1] > g1[2]


def test_bound_unknown_field(tmp_path):
    cfg = _write(tmp_path, {"bound": {**BOUND, "zeta": 1}})
    assert cli.main(["bound", "--config", str(cfg)]) == 2


@pytest.mark.parametrize("client,enclave,expected", [(1500, 10, 150), (119, 1, 119), (38, 1, 38), (105, 1, 105)])
def test_capacity(client, enclave, expected, capsys):
    assert cli.main(["capacity", "--client-ms", str(client), "--enclave-ms", str(enclave)]) == 0
    assert capsys.readouterr().out.strip() == str(expected)


def test_capacity_bottleneck_warns(capsys):
    with pytest.warns(UserWarning, match="bottleneck"):
        cli.main(["capacity", "--client-ms", "5", "--enclave-ms", "10"])
    assert capsys.readouterr().out.strip() == "0"
