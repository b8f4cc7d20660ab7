"""
Shallow Lake CLI Tests
======================
Config precedence, config-file errors, emitted files and exit codes.

RUN:
    pytest tests/test_cli.py -v
"""

import json
import sys
from pathlib import Path

import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from cli import build_parser, main, resolve_config
from errors import ConfigError
from outputs import sha256_file
from solver import Closure


def resolve(*argv):
    args = build_parser().parse_args(list(argv))
    return resolve_config(args.command, args)


def run_cli(out: Path, *argv) -> int:
    return main([*argv, "--out", str(out), "--jobs", "1"])


def load_manifest(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


# ═══════════════════════════════════════════════════════════════════════
# CONFIGURATION
# ═══════════════════════════════════════════════════════════════════════

class TestResolveConfig:
    """defaults < config file < CLI flags"""

    def test_defaults(self):
        cfg = resolve("solve")
        assert cfg.params.b == 0.65 and cfg.params.sigma == 0.1
        assert cfg.grid.closure == Closure.SLOPE
        assert cfg.sim.n_paths == 1

    def test_file_then_flags(self, snapshots):
        cfg = resolve("sweep", "--config", str(snapshots / "bimodal_base.env"), "--sigma", "0.2", "--n", "2000")
        assert cfg.params.sigma == 0.2
        assert cfg.params.c == 0.5
        assert cfg.grid.n == 2000
        assert cfg.sweep.name == "sigma"
        assert cfg.sweep.values() == pytest.approx([0.1, 0.35, 0.6])

    def test_sweep_flag(self):
        cfg = resolve("sweep", "--sweep", "rho:0.02:0.08:4")
        assert cfg.sweep.name == "rho"
        assert cfg.sweep.count == 4

    def test_rate_flags(self):
        cfg = resolve("solve", "--rate", "tanh_shifted", "--rate-slope", "4", "--rate-scale", "0.5")
        assert cfg.params.rate.kind.value == "tanh_shifted"
        assert cfg.params.rate.slope == 4.0 and cfg.params.rate.scale == 0.5

    def test_unknown_key_names_line(self, snapshots):
        with pytest.raises(ConfigError) as exc:
            resolve("solve", "--config", str(snapshots / "unknown_key.env"))
        assert exc.value.detail["key"] == "sigmaa"
        assert exc.value.detail["line"] == 3
        assert exc.value.exit_code == 2

    def test_duplicate_key(self, snapshots):
        with pytest.raises(ConfigError) as exc:
            resolve("solve", "--config", str(snapshots / "duplicate_key.env"))
        assert exc.value.detail["key"] == "c"
        assert exc.value.detail["line"] == 3
        assert exc.value.detail["first_line"] == 1

    def test_invalid_value_names_key(self):
        with pytest.raises(ConfigError) as exc:
            resolve("solve", "--n", "four")
        assert exc.value.detail["key"] == "grid.n"
        assert exc.value.detail["source"] == "--n"

    def test_malformed_sweep(self):
        with pytest.raises(ConfigError) as exc:
            resolve("sweep", "--sweep", "sigma:0.1")
        assert exc.value.detail["key"] == "sweep"

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError):
            resolve("solve", "--config", str(tmp_path / "absent.env"))


# ═══════════════════════════════════════════════════════════════════════
# RUNS
# ═══════════════════════════════════════════════════════════════════════

class TestSolveCommand:
    """solve writes solution.csv, solution.json and the manifest"""

    def test_outputs(self, tmp_path):
        assert run_cli(tmp_path, "solve", "--n", "400") == 0

        table = pd.read_csv(tmp_path / "solution.csv")
        assert list(table.columns) == ["x", "V", "dV", "policy"]
        assert len(table) == 401
        assert (table["dV"] < 0).all()

        sidecar = json.loads((tmp_path / "solution.json").read_text())
        assert sidecar["closure"] == "slope"
        assert sidecar["residual_norm"] <= 1e-10
        assert sidecar["policy_jump_at_l"] >= 0

        manifest = load_manifest(tmp_path / "manifest.json")
        assert manifest["exit_code"] == 0
        assert {f["name"] for f in manifest["files"]} == {"solution.csv", "solution.json"}
        for f in manifest["files"]:
            assert f["sha256"] == sha256_file(tmp_path / f["name"])

    def test_reruns_are_byte_identical(self, tmp_path):
        assert run_cli(tmp_path / "a", "solve", "--n", "400") == 0
        assert run_cli(tmp_path / "b", "solve", "--n", "400") == 0
        assert (tmp_path / "a" / "solution.csv").read_bytes() == (tmp_path / "b" / "solution.csv").read_bytes()


class TestExitCodes:
    """0 ok, 2 config/parameter, 3 numerical, 4 partial sweep"""

    def test_config_error(self, tmp_path, capsys):
        assert run_cli(tmp_path, "solve", "--n", "x") == 2
        report = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert report["error"] == "ConfigError"

    def test_nonpositive_parameter(self, tmp_path):
        assert run_cli(tmp_path, "solve", "--b", "-1") == 2
        report = json.loads((tmp_path / "error.json").read_text())
        assert report["error"] == "NonpositiveParameter"
        assert load_manifest(tmp_path / "manifest.json")["exit_code"] == 2

    def test_verify_refuses_inadmissible_parameters(self, tmp_path):
        assert run_cli(tmp_path, "verify", "--sigma", "1.2") == 2
        assert json.loads((tmp_path / "error.json").read_text())["error"] == "FinitenessViolation"

    def test_monotonicity_violation(self, tmp_path):
        assert run_cli(tmp_path, "solve", "--b", "0.3", "--n", "100") == 3
        report = json.loads((tmp_path / "error.json").read_text())
        assert report["error"] == "MonotonicityViolation"
        assert report["detail"]["min_n"] > 100

    def test_partial_sweep(self, tmp_path):
        assert run_cli(tmp_path, "sweep", "--sweep", "sigma:0.1:1.2:2", "--n", "1000") == 4
        sweep = json.loads((tmp_path / "sweep.json").read_text())
        assert sweep["partial"] is True
        assert sweep["failed"] == [1.2]
        assert (tmp_path / "sweep.csv").exists()
        assert json.loads((tmp_path / "error.json").read_text())["error"] == "PartialSweep"

    def test_escape_without_second_attractor(self, tmp_path):
        assert run_cli(tmp_path, "escape", "--b", "0.8", "--n", "1000", "--samples", "5") == 3
        assert json.loads((tmp_path / "error.json").read_text())["error"] == "NoSecondAttractor"


class TestOtherCommands:
    """density and simulate tables"""

    def test_density(self, tmp_path):
        assert run_cli(tmp_path, "density", "--n", "1000") == 0
        table = pd.read_csv(tmp_path / "density.csv")
        assert list(table.columns) == ["x", "f", "F", "I"]
        assert table["F"].is_monotonic_increasing
        sidecar = json.loads((tmp_path / "density.json").read_text())
        assert sidecar["labels"] == ["oligotrophic", "eutrophic"]

    def test_simulate(self, tmp_path):
        assert run_cli(tmp_path, "simulate", "--n", "1000", "--horizon", "1", "--dt", "1e-3") == 0
        table = pd.read_csv(tmp_path / "path.csv")
        assert list(table.columns) == ["t", "x"]
        assert len(table) == 1001
        assert (table["x"] > 0).all()
        sidecar = json.loads((tmp_path / "simulate.json").read_text())
        assert sidecar["mc"] is None
