import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mems4 import __version__
from mems4.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from mems4.cli_io import (
    ParseError,
    ValidationError,
    default_config,
    parse_config,
    parse_config_text,
    read_csv,
    read_profile,
    report,
    time_label,
    write_csv,
    write_json,
    write_profile,
)
from mems4.mesh_ops import build_grid


class TestConfig:
    def test_minimal_file_gets_defaults(self):
        cfg = parse_config_text('model = "parabolic"\nlambda = 0.3\n')
        assert (cfg.B, cfg.T, cfg.lam, cfg.N, cfg.dt, cfg.t_end) == (0.01, 1.0, 0.3, 256, 1e-3, 200.0)
        assert cfg.domain == (-1.0, 1.0) and cfg.u0.kind == "zero"

    def test_hyperbolic_defaults(self):
        cfg = parse_config_text('model = "hyperbolic"\n')
        assert (cfg.B, cfg.dt, cfg.t_end) == (1.0, 5e-4, 50.0)

    def test_kappa_out_of_range(self):
        with pytest.raises(ValidationError, match=r"kappa must lie in \(0,1\)"):
            parse_config_text("kappa = 1.5\n")

    @pytest.mark.parametrize("text", ["N = 4\n", "dt = -1.0\n", "domain = [1.0, -1.0]\n", "B = 0.0\n"])
    def test_invalid_values(self, text):
        with pytest.raises(ValidationError):
            parse_config_text(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError, match="not found"):
            parse_config(tmp_path / "nope.toml")

    def test_malformed_line_is_reported(self):
        with pytest.raises(ParseError) as info:
            parse_config_text('model = "parabolic"\nlambda = = 0.3\n')
        assert info.value.line == 2

    def test_unknown_field(self):
        with pytest.raises(ParseError) as info:
            parse_config_text('lambda = 0.3\nvoltage = 4\n')
        assert info.value.field == "voltage" and info.value.line == 2

    def test_wrong_types(self):
        with pytest.raises(ParseError):
            parse_config_text('lambda = "big"\n')
        with pytest.raises(ParseError):
            parse_config_text("domain = [0.0]\n")

    def test_initial_data_kinds(self, tmp_path):
        g = build_grid(-1, 1, 16)
        write_profile(tmp_path / "u0.csv", g, -0.1 * np.ones(15))
        text = 'N = 16\nu0 = { kind = "file", path = "u0.csv" }\nu1 = { kind = "scaled_bump", amplitude = 0.2 }\n'
        (tmp_path / "case.toml").write_text(text)
        cfg = parse_config(tmp_path / "case.toml")
        np.testing.assert_array_equal(cfg.initial_u(), -0.1 * np.ones(15))
        np.testing.assert_allclose(cfg.initial_v(), 0.2 * (1 - g.x**2) ** 2, rtol=1e-15)
        with pytest.raises(ParseError):
            parse_config_text('u0 = { kind = "random" }\n')

    def test_echo_and_overrides(self):
        cfg = default_config("parabolic", lam=0.2)
        echo = cfg.echo()
        assert echo["lambda"] == 0.2 and "lam" not in echo and "base_dir" not in echo
        assert cfg.with_overrides(lam=None, N=64).N == 64 and cfg.with_overrides(lam=None).lam == 0.2


class TestOutput:
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=30))
    def test_csv_round_trip_is_exact(self, tmp_path_factory, values):
        path = tmp_path_factory.mktemp("csv") / "a.csv"
        write_csv(path, ("a", "b"), [values, values[::-1]])
        back = read_csv(path)
        assert np.array_equal(back["a"], np.array(values)) and np.array_equal(back["b"], np.array(values[::-1]))

    def test_nan_survives_csv(self, tmp_path):
        write_csv(tmp_path / "n.csv", ("v",), [[np.nan, 1.0]])
        assert np.isnan(read_csv(tmp_path / "n.csv")["v"][0])

    def test_time_labels(self):
        assert time_label(78.39) == "78.39" and time_label(0.5) == "0.5" and time_label(10000) == "10000.0"

    def test_profile_errors(self, tmp_path):
        (tmp_path / "bad.csv").write_text("x,w\n0,1\n")
        with pytest.raises(ValidationError):
            read_profile(tmp_path / "bad.csv")

    def test_report_schema(self, tmp_path):
        payload = report("steady", default_config(), {"value": np.float64(np.nan), "arr": np.arange(2)})
        assert set(payload) == {"command", "config_echo", "results", "version"}
        assert payload["version"] == __version__
        write_json(tmp_path / "r.json", payload)
        back = json.loads((tmp_path / "r.json").read_text())
        assert back["results"] == {"value": None, "arr": [0, 1]}


class TestCli:
    def test_steady_writes_outputs(self, tmp_path, capsys):
        assert main(["steady", "--lambda", "0.3", "--N", "64", "--out", str(tmp_path)]) == EXIT_OK
        d = tmp_path / "steady_lambda0.3"
        rep = json.loads((d / "report.json").read_text())
        assert rep["command"] == "steady" and rep["config_echo"]["N"] == 64
        assert rep["results"]["smallest_eig"] > 0
        assert read_profile(d / "profile.csv")[1].size == 63
        assert "min psi" in capsys.readouterr().out

    def test_outputs_are_deterministic(self, tmp_path):
        args = ["parabolic", "--lambda", "0.3", "--N", "32", "--dt", "0.01", "--t-end", "1"]
        assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
        for name in ("trajectory.csv", "report.json"):
            a = (tmp_path / "a" / "parabolic_lambda0.3" / name).read_bytes()
            b = (tmp_path / "b" / "parabolic_lambda0.3" / name).read_bytes()
            assert a.replace(b"/a", b"") == b.replace(b"/b", b"")

    def test_hyperbolic_trajectory_has_velocity(self, tmp_path):
        args = ["hyperbolic", "--lambda", "1", "--N", "32", "--t-end", "0.05", "--out", str(tmp_path)]
        assert main(args) == EXIT_OK
        cols = read_csv(tmp_path / "hyperbolic_lambda1.0" / "trajectory.csv")
        assert "l2_v" in cols and cols["t"][0] == 0.0

    def test_numerical_failure_exit_code(self, tmp_path):
        assert main(["steady", "--lambda", "0.6", "--N", "32", "--out", str(tmp_path)]) == EXIT_NUMERICAL

    @pytest.mark.parametrize(
        "argv",
        [["bogus"], [], ["steady", "--lambda", "x"], ["steady", "--config", "/nonexistent/case.toml"], ["steady", "--N", "3"]],
    )
    def test_usage_errors(self, argv, tmp_path):
        assert main(argv + ["--out", str(tmp_path)] if argv and argv[0] == "steady" else argv) == EXIT_USAGE

    def test_config_with_override(self, tmp_path):
        (tmp_path / "c.toml").write_text(f'lambda = 0.1\nN = 32\noutput_dir = "{tmp_path / "o"}"\n')
        assert main(["steady", "--config", str(tmp_path / "c.toml"), "--lambda", "0.2"]) == EXIT_OK
        rep = json.loads((tmp_path / "o" / "steady_lambda0.2" / "report.json").read_text())
        assert rep["config_echo"]["lambda"] == 0.2
