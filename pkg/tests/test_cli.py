import json

import numpy as np
import pytest

from roughcouple.cli import (
    CONFIG_KEYS,
    ConfigError,
    EXIT_CONFIG,
    EXIT_OK,
    main,
    mean_reversion_sine,
    parse_config_file,
)


def write_config(tmp_path, text):
    f = tmp_path / "exp.cfg"
    f.write_text(text)
    return str(f)


def test_parse_config_roundtrip(tmp_path):
    path = write_config(
        tmp_path,
        """
        # experiment settings
        hurst = 0.4
        level = 6          # cells per unit: 64
        replicas = 2
        horizon = 10.0
        """,
    )
    cfg = parse_config_file(path)
    assert cfg == {"hurst": 0.4, "level": 6, "replicas": 2, "horizon": 10.0}


def test_parse_config_rejects_unknown_key(tmp_path):
    path = write_config(tmp_path, "no_such_key = 3\n")
    with pytest.raises(ConfigError, match="no_such_key"):
        parse_config_file(path)


def test_unknown_subcommand_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_bad_config_value_exit_code(tmp_path):
    path = write_config(tmp_path, "gamma = 0.45\n")  # gamma >= H
    code = main(["sample-fbm", "--config", path, "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG


def test_sample_fbm_and_lift(tmp_path):
    out = str(tmp_path / "arts")
    path = write_config(tmp_path, "level = 6\nsub_level = 9\nt_past = 64.0\n")
    assert main(["sample-fbm", "--config", path, "--seed", "5", "--out", out]) == EXIT_OK
    for name in ("w.csv", "x.csv", "d.csv", "z.csv", "dprime.csv", "meta.json"):
        assert (tmp_path / "arts" / "fbm" / name).exists()
    assert main(["lift", "--config", path, "--seed", "5", "--out", out]) == EXIT_OK
    area = (tmp_path / "arts" / "lift" / "area.csv").read_text().splitlines()
    assert area[0] == "s,t,a11"


def test_solve_writes_solution(tmp_path):
    out = str(tmp_path / "arts")
    path = write_config(tmp_path, "level = 6\nsub_level = 9\nt_past = 64.0\n")
    assert main(["solve", "--config", path, "--out", out]) == EXIT_OK
    lines = (tmp_path / "arts" / "solve" / "solution.csv").read_text().splitlines()
    assert lines[0] == "t,x1"
    assert len(lines) == 2 + 2**6


def test_hit_command(tmp_path):
    out = str(tmp_path / "arts")
    path = write_config(
        tmp_path, "level = 6\nt_past = 64.0\nhorizon = 4.0\nburn_in = 0.0\n"
    )
    assert main(["hit", "--config", path, "--out", out]) == EXIT_OK
    header = (tmp_path / "arts" / "hit" / "hitting.csv").read_text().splitlines()[0]
    assert header == "t,xi,y1,j1"


def test_couple_determinism_byte_identical(tmp_path):
    cfgtext = "level = 6\nt_past = 64.0\nhorizon = 8.0\nburn_in = 1.0\nreplicas = 2\n"
    path = write_config(tmp_path, cfgtext)
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    assert main(["couple", "--config", path, "--seed", "3", "--out", out_a]) == EXIT_OK
    assert main(["couple", "--config", path, "--seed", "3", "--out", out_b]) == EXIT_OK
    for name in ("trace_0000.csv", "trace_0001.csv", "summary.json"):
        a = (tmp_path / "a" / "couple" / name).read_bytes()
        b = (tmp_path / "b" / "couple" / name).read_bytes()
        assert a == b


def test_rate_reports_slope(tmp_path):
    cfgtext = "level = 6\nt_past = 64.0\nhorizon = 12.0\nburn_in = 1.0\nreplicas = 4\n"
    path = write_config(tmp_path, cfgtext)
    out = str(tmp_path / "arts")
    code = main(["rate", "--config", path, "--seed", "5", "--out", out])
    assert code == EXIT_OK
    tail = (tmp_path / "arts" / "rate" / "tail.csv").read_text().splitlines()
    assert tail[0] == "t,survival,tv_bound"
    slope = json.loads((tmp_path / "arts" / "rate" / "slope.json").read_text())
    assert "slope" in slope and "note" in slope


def test_env_out_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("ROUGHCOUPLE_OUT", str(tmp_path / "envout"))
    path = write_config(tmp_path, "level = 6\nsub_level = 8\nt_past = 64.0\n")
    assert main(["sample-fbm", "--config", path, "--seed", "1"]) == EXIT_OK
    assert (tmp_path / "envout" / "fbm" / "x.csv").exists()


def test_field_registry_dimensions():
    vf = mean_reversion_sine(2)
    v = np.array([0.3, -0.7])
    assert vf.b(v).shape == (2,)
    assert vf.sigma(v).shape == (2, 2)
    rep = vf.check_h1(probe_box=2.0, n_probe=10)
    assert rep["jacobian_sigma_mismatch"] < 1e-6
