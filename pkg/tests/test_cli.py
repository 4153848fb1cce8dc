import json
import subprocess
import sys

import pytest

from kinlab.cli import main
from kinlab.experiments import default_config


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert main(["lanford", str(missing)]) == 1
    err = capsys.readouterr().err
    assert "config file not found" in err and str(missing) in err


def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["teleport"]) == 1
    assert main(["lanford", "--seed", "x"]) == 1


def test_experiment_mismatch(tmp_path, capsys):
    p = tmp_path / "c.cfg"
    p.write_text(default_config("lanford").to_text(), encoding="utf-8")
    assert main(["reversal", str(p)]) == 1
    assert "configures Lanford" in capsys.readouterr().err


def test_invalid_override_is_config_error(tmp_path, capsys):
    assert main(["lanford", "--ensemble", "3", "--out", str(tmp_path)]) == 1
    assert "configuration error" in capsys.readouterr().err


def test_simulate_exit_zero(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path), "--seed", "4"]) == 0
    out = capsys.readouterr().out
    assert "[PASS] energy" in out
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["provenance"]["seed"] == 4 and data["experiment"] == "Simulate"


def test_reversal_maxwellian_reports_na(tmp_path, capsys):
    p = tmp_path / "rev.cfg"
    p.write_text("experiment = Reversal\nvelocity = maxwellian\nsweep = 64:1\nensemble = 30\n"
                 "dsmc_samples = 5000\n", encoding="utf-8")
    assert main(["reversal", str(p), "--out", str(tmp_path / "o")]) == 0
    assert "[n/a] dsmc_irreversible" in capsys.readouterr().out


def test_failing_flag_exits_two(tmp_path, capsys):
    # with a single tiny ensemble the GK estimator cannot hit 5 percent
    p = tmp_path / "d.cfg"
    p.write_text("experiment = DCoeff\nn_paths = 20\nseed = 1\n", encoding="utf-8")
    assert main(["dcoeff", str(p), "--out", str(tmp_path / "o"), "--quiet"]) == 2
    assert capsys.readouterr().out == ""


def test_console_script_entry():
    res = subprocess.run([sys.executable, "-m", "kinlab.cli", "nonsense"], capture_output=True, text=True)
    assert res.returncode == 1
