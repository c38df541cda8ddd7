"""Configuration resolution and the command-line front end."""

import json
import os
from pathlib import Path

import numpy as np
import pytest

import exitlab
from exitlab import ConfigError
from exitlab.cli import dispatch
from exitlab.config import load_file, resolve


def test_defaults_resolved():
    cfg = resolve("simulate", None, {"model": "sirs", "N": 100}, env={})
    assert cfg.run["T"] == 10.0
    assert cfg.run["reflect"] is False
    assert cfg.seed == 0
    assert cfg.numerics["rel_tol"] == 1e-8
    assert cfg.out_dir == "exitlab-out"


def test_missing_required_key():
    with pytest.raises(ConfigError, match="N"):
        resolve("simulate", None, {"model": "sirs"}, env={})


def test_unknown_run_key_named():
    with pytest.raises(ConfigError, match="bogus"):
        resolve("simulate", {"run": {"bogus": "1"}},
                {"model": "sirs", "N": 10}, env={})


def test_unknown_model_param_named():
    with pytest.raises(ConfigError, match="zeta"):
        resolve("simulate", {"model": {"name": "sirs", "zeta": "2"}},
                {"N": 10}, env={})


def test_unknown_section_named(tmp_path):
    f = tmp_path / "bad.ini"
    f.write_text("[extras]\nfoo = 1\n")
    with pytest.raises(ConfigError, match="extras"):
        load_file(f)


def test_flags_beat_file_beat_env(tmp_path):
    f = tmp_path / "cfg.ini"
    f.write_text("[model]\nname = sirs\nlambda = 2\ngamma = 1\nrho = 1\n"
                 "[run]\nN = 500\nseed = 5\n")
    file_cfg = load_file(f)
    env = {"EXITLAB_SEED": "9"}
    cfg = resolve("simulate", file_cfg, {"N": 700}, env=env)
    assert cfg.run["N"] == 700
    assert cfg.seed == 5
    cfg2 = resolve("simulate", file_cfg, {"N": 700, "seed": 1}, env=env)
    assert cfg2.seed == 1
    f2 = tmp_path / "cfg2.ini"
    f2.write_text("[model]\nname = sirs\n[run]\nN = 500\n")
    cfg3 = resolve("simulate", load_file(f2), {}, env=env)
    assert cfg3.seed == 9


def test_effective_echo_is_complete():
    cfg = resolve("profile", None, {"model": "siv", "beta": 4.0}, env={})
    eff = cfg.effective()
    assert eff["command"] == "profile"
    assert eff["model"]["name"] == "siv"
    assert set(eff["run"]) == {"stride", "M", "refine"}
    assert "seed" in eff and "output_dir" in eff


def test_bad_value_coercion_named():
    with pytest.raises(ConfigError, match="N"):
        resolve("simulate", {"run": {"N": "many"}}, {"model": "sirs"},
                env={})


def test_int_list_parsing():
    cfg = resolve("exit-measure", None,
                  {"model": "siv", "N_list": "100, 200,400"}, env={})
    assert cfg.run["N_list"] == [100, 200, 400]


def test_cli_unknown_model_exit_code(tmp_path, capsys):
    rc = dispatch(["simulate", "--model", "unknown", "--N", "10",
                   "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert rc == 2
    assert "model" in err


def test_cli_missing_model_exit_code(tmp_path, capsys):
    rc = dispatch(["simulate", "--N", "10", "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "model" in capsys.readouterr().err


def test_cli_simulate_writes_artifacts(tmp_path):
    out = tmp_path / "sim"
    rc = dispatch(["simulate", "--model", "sirs", "--lambda", "2",
                   "--gamma", "1", "--rho", "1", "--N", "200", "--T", "3",
                   "--seed", "11", "--out", str(out)])
    assert rc == 0
    names = {p.name for p in out.iterdir()}
    assert names == {"trajectory.csv", "trajectory.png", "manifest.json"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["version"] == exitlab.__version__
    assert manifest["config"]["seed"] == 11
    assert manifest["config"]["run"]["N"] == 200
    assert set(manifest["files"]) == {"trajectory.csv", "trajectory.png"}


def test_cli_simulate_rerun_bit_identical(tmp_path):
    args = ["simulate", "--model", "sirs", "--lambda", "2", "--gamma", "1",
            "--rho", "1", "--N", "150", "--T", "3", "--seed", "4"]
    assert dispatch(args + ["--out", str(tmp_path / "a")]) == 0
    assert dispatch(args + ["--out", str(tmp_path / "b")]) == 0
    csv_a = (tmp_path / "a" / "trajectory.csv").read_bytes()
    csv_b = (tmp_path / "b" / "trajectory.csv").read_bytes()
    assert csv_a == csv_b
    man_a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    man_b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert man_a["files"]["trajectory.csv"] == man_b["files"]["trajectory.csv"]


def test_cli_no_writes_outside_out_dir(tmp_path, monkeypatch):
    workdir = tmp_path / "cwd"
    workdir.mkdir()
    monkeypatch.chdir(workdir)
    out = tmp_path / "target"
    rc = dispatch(["simulate", "--model", "sirs", "--lambda", "2",
                   "--gamma", "1", "--rho", "1", "--N", "50", "--T", "1",
                   "--out", str(out)])
    assert rc == 0
    assert list(workdir.iterdir()) == []


def test_cli_basin_command(tmp_path):
    out = tmp_path / "basin"
    rc = dispatch(["basin", "--model", "sirs", "--lambda", "2", "--gamma",
                   "1", "--rho", "1", "--out", str(out)])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["result"]["characteristic_violation"] <= 1e-3
    assert (out / "trace.csv").exists()
    assert (out / "boundary.png").exists()


def test_cli_minpath_discrete(tmp_path):
    out = tmp_path / "mp"
    rc = dispatch(["minpath", "--model", "sirs", "--lambda", "2", "--gamma",
                   "1", "--rho", "1", "--method", "discrete", "--M", "12",
                   "--out", str(out)])
    assert rc == 0
    data = json.loads((out / "minpath.json").read_text())
    assert data["summary"]["discrete"] == pytest.approx(0.0741, rel=0.05)


def test_cli_config_file_and_flag_override(tmp_path):
    ini = tmp_path / "run.ini"
    out = tmp_path / "from-file"
    ini.write_text(
        "[model]\nname = sirs\nlambda = 2\ngamma = 1\nrho = 1\n"
        f"[run]\nN = 100\nT = 2\n[output]\ndir = {out}\n")
    rc = dispatch(["simulate", "--config", str(ini), "--seed", "3",
                   "--N", "120"])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["run"]["N"] == 120
    assert manifest["config"]["seed"] == 3


def test_cli_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        dispatch(["--version"])
    assert exc.value.code == 0
    assert exitlab.__version__ in capsys.readouterr().out
