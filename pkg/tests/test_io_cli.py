import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from pdpocp.cli import main, parse_range
from pdpocp.grid import ControlTrajectory, TimeGrid
from pdpocp.io import (
    OUT_ENV, ConfigError, InputFormatError, build_pdp_config, config_hash, fmt, load_config,
    output_dir, read_controls, read_csv, validate_config, write_controls, write_csv,
)


@pytest.fixture(autouse=True)
def _no_env_out(monkeypatch):
    monkeypatch.delenv(OUT_ENV, raising=False)


def test_fmt_values():
    assert fmt(None) == "" and fmt(True) == "1" and fmt(np.int64(3)) == "3"
    assert fmt(0.1) == "0.10000000000000001"


@settings(suppress_health_check=[HealthCheck.function_scoped_fixture], max_examples=50)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
def test_csv_round_trip_bit_exact(tmp_path, values):
    path = write_csv(tmp_path / "v.csv", ("v",), [(v,) for v in values])
    _, data = read_csv(path)
    assert data[:, 0].tobytes() == np.array(values, dtype=float).tobytes()


def test_controls_round_trip(tmp_path, rng):
    g = TimeGrid(12.0, 17)
    u = ControlTrajectory(rng.uniform(-0.4, 0.4, (2, 17)))
    g2, u2 = read_controls(write_controls(tmp_path / "u.csv", g, u), 12.0)
    assert g2.N == 17 and np.array_equal(u2.values, u.values)


def test_controls_off_grid(tmp_path):
    path = tmp_path / "u.csv"
    path.write_text("t,u1\n0,0.1\n0.7,0.2\n")
    with pytest.raises(InputFormatError, match=r"u\.csv:3"):
        read_controls(path, 1.0)


@pytest.mark.parametrize("text, line", [
    ("t,u1\n0,0.5\n0.5,abc\n", 3),
    ("t,u1\n0,0.5,1\n", 2),
    ("", 1),
])
def test_malformed_csv_reports_line(tmp_path, text, line):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(InputFormatError, match=rf"bad\.csv:{line}"):
        read_controls(path, 1.0)


def test_config_unknown_key():
    with pytest.raises(ConfigError, match="frobnicate"):
        validate_config({"model": "double_integrator", "frobnicate": 1})
    with pytest.raises(ConfigError, match="pdp"):
        validate_config({"model": "double_integrator", "pdp": {"gamma": 1}})


def test_config_bad_json_line(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{\n  "model": "double_integrator",\n  "N": ,\n}\n')
    with pytest.raises(ConfigError, match=r"c\.json:3"):
        load_config(path)


def test_config_overrides():
    cfg = build_pdp_config({"model": "double_integrator", "step_rule": 2,
                            "pdp": {"beta": 5.0, "max_outer": 7}, "inner": {"restarts": 0}})
    assert cfg.step_rule.beta == 5.0 and cfg.step_rule.theta == (1.0,)
    assert cfg.max_outer == 7 and cfg.inner.restarts == 0


def test_config_hash_stable():
    a = {"model": "x", "N": 3, "pdp": {"c0": 1.0}}
    b = {"pdp": {"c0": 1.0}, "N": 3, "model": "x"}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({**a, "N": 4})


def test_env_overrides_out(monkeypatch, tmp_path):
    assert output_dir("given") == output_dir("given").__class__("given")
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert output_dir("given") == tmp_path / "env"


def test_parse_range():
    assert parse_range("0:20:1") == [float(k) for k in range(21)]
    assert parse_range("1,2.5") == [1.0, 2.5]
    with pytest.raises(ConfigError):
        parse_range("3:1:1")


def _run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path)])


def test_solve_writes_outputs(tmp_path):
    code = _run(tmp_path, "solve", "--model", "double_integrator", "--N", "100")
    assert code == 0
    for name in ("u.csv", "x.csv", "history.csv", "summary.json", "manifest.json"):
        assert (tmp_path / name).exists()
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"] == "Converged" and summary["h_linf"] < 1e-6
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert {e["file"] for e in man["files"]} == {"u.csv", "x.csv", "history.csv", "summary.json"}
    assert all(e["config_hash"] == man["config_hash"] for e in man["files"])


def test_solve_exit_code_on_cap(tmp_path):
    assert _run(tmp_path, "solve", "--model", "double_integrator", "--N", "50", "--max-outer", "1") == 2


def test_missing_model_is_config_error(tmp_path, capsys):
    assert _run(tmp_path, "solve", "--N", "10") == 1
    assert "model" in capsys.readouterr().err


def test_unknown_model(tmp_path):
    assert _run(tmp_path, "solve", "--model", "unicycle") == 1


def test_bad_flag_exits_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        _run(tmp_path, "solve", "--model", "double_integrator", "--step-rule", "7")
    assert exc.value.code == 1


def test_certify_round_trip(tmp_path):
    assert _run(tmp_path, "solve", "--model", "double_integrator", "--N", "200") == 0
    out = tmp_path / "cert"
    assert main(["certify", "--model", "double_integrator", "--u", str(tmp_path / "u.csv"),
                 "--out", str(out)]) == 0
    cert = json.loads((out / "certificate.json").read_text())
    assert cert["max_clip_violation"] < 1e-6
    assert len(cert["switching"][0]) == 200


def test_certify_wrong_width(tmp_path):
    assert _run(tmp_path, "solve", "--model", "double_integrator", "--N", "20") == 0
    assert main(["certify", "--model", "free_flying_robot", "--u", str(tmp_path / "u.csv"),
                 "--out", str(tmp_path / "c")]) == 1


def test_sweep_rows(tmp_path):
    assert _run(tmp_path, "sweep", "--model", "double_integrator", "--N", "50", "--c", "0:20:1") == 0
    header, data = read_csv(tmp_path / "dual.csv")
    assert header[:2] == ["c", "q"] and data.shape[0] == 21
    assert data[0, 1] == 0.0


def _files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.suffix == ".csv"}


@pytest.mark.parametrize("argv", [
    ("experiment", "--kind", "success_rate", "--model", "double_integrator", "--N", "40",
     "--runs", "3", "--seed", "5"),
    ("solve", "--model", "free_flying_robot", "--N", "30", "--init", "random", "--seed", "2"),
])
def test_repeat_is_byte_identical(tmp_path, argv):
    assert main([*argv, "--out", str(tmp_path / "a")]) == main([*argv, "--out", str(tmp_path / "b")])
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a and a == b


def test_config_file_drives_run(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"model": "double_integrator", "N": 60, "step_rule": 2,
                               "out": str(tmp_path / "from_cfg")}))
    assert main(["solve", "--config", str(cfg)]) == 0
    summary = json.loads((tmp_path / "from_cfg" / "summary.json").read_text())
    assert summary["N"] == 60


def test_env_var_wins_over_flag(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert main(["solve", "--model", "double_integrator", "--N", "20", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "u.csv").exists() and not (tmp_path / "flag").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pdpocp", "solve", "--model", "double_integrator",
                           "--N", "20", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "Converged" in proc.stdout
