import math
import subprocess
import sys

import pytest

from depthlab.cli import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_FAIL,
    EXIT_OK,
    ConfigError,
    main,
    parse_config_text,
    resolve_config,
)


def summary(out):
    rows = {}
    for line in (out / "summary.txt").read_text().splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            rows[k.strip()] = v
    return rows


def test_config_text_parsing():
    vals = parse_config_text("# header\nN = 32  # width\n\nscheme=mup\n")
    assert vals == {"N": "32", "scheme": "mup"}
    with pytest.raises(ConfigError):
        parse_config_text("N 32")


def test_resolve_config_types_and_overrides():
    c = resolve_config("sweep", {"N_list": "32, 64", "lr_grid": "2^-3,2^-2"}, {"N_list": "16"})
    assert c["N_list"] == [16]
    assert c["lr_grid"] == [0.125, 0.25]
    assert c["steps"] == 100
    with pytest.raises(ConfigError, match="unknown config key: widht"):
        resolve_config("train", {"widht": "3"}, {})
    with pytest.raises(ConfigError, match="bad value for N"):
        resolve_config("train", {}, {"N": "many"})


def test_unknown_subcommand(capsys):
    assert main(["fly"]) == EXIT_CONFIG
    assert "usage" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["gradcheck", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "config" in capsys.readouterr().err


def test_bad_value_and_unknown_flag(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--N", "x"]) == EXIT_CONFIG
    assert main(["train", "--out", str(tmp_path), "--nonsense", "1"]) == EXIT_CONFIG
    assert main(["train", "--out", str(tmp_path), "--scheme", "ntk"]) == EXIT_CONFIG


def test_gradcheck_defaults(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == EXIT_OK
    assert "max relative error" in capsys.readouterr().out
    s = summary(tmp_path)
    assert float(s["max_relative_error"]) < 1e-5 and s["passed"] == "true"
    assert (tmp_path / "gradcheck.csv").read_text().startswith("scheme,K,train_readin,train_readout,tensor,rel_error\n")


def test_gradcheck_failing_tolerance(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path), "--N", "4", "--L", "2", "--tolerance", "1e-30"]) == EXIT_FAIL


def test_limit_ode_linear(tmp_path):
    assert main(["limit-ode", "--out", str(tmp_path), "--act", "linear"]) == EXIT_OK
    s = summary(tmp_path)
    assert abs(float(s["H(1)"]) - math.e) < 1e-6
    assert (tmp_path / "profile.csv").exists() and (tmp_path / "ntk.csv").exists()


def test_config_file_echo(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("act = tanh\nM = 16\n")
    out = tmp_path / "o"
    assert main(["limit-ode", "--config", str(cfg), "--out", str(out), "--M", "8"]) == EXIT_OK
    echoed = (out / "config.txt").read_text().splitlines()
    assert echoed == ["# depthlab limit-ode", "master_seed = 0", "act = tanh", "M = 8", "probe_angles = 0.0"]


def test_train_divergence_exit_code(tmp_path):
    args = ["train", "--out", str(tmp_path), "--N", "8", "--L", "2", "--P", "64", "--batch_size", "8",
            "--steps", "20", "--eta0", "1e5", "--seeds", "1"]
    assert main(args) == EXIT_DIVERGED
    assert (tmp_path / "train.csv").exists()


def test_sweep_writes_optimum(tmp_path):
    args = ["sweep", "--out", str(tmp_path), "--N_list", "8", "--L_list", "2", "--P", "64", "--batch_size", "8",
            "--steps", "5", "--seeds", "1", "--lr_grid", "2^-4,2^-3,2^-2,2^-1,2^0,2^1"]
    assert main(args) == EXIT_OK
    rows = (tmp_path / "optimum.csv").read_text().splitlines()
    assert rows[0] == "scheme,N,L,opt_index,opt_lr" and len(rows) == 2
    assert "index spread mup_sqrtl" in (tmp_path / "summary.txt").read_text()


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "depthlab", "limit-ode", "--out", str(tmp_path), "--M", "8"],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
