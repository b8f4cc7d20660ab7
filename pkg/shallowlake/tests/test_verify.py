"""
Shallow Lake Verify Tests
=========================
Report bookkeeping, the stable check schema and end-to-end verify runs.
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

import verify
from audit_logger import AuditLogger, audit_logger
from errors import DriftEvaluationOutOfRange
from models import LakeParams
from schemas import GridSection, RunConfig
from verify import (
    CHECKS,
    DENSITY_CHECKS,
    MC_CHECKS,
    VerifyReport,
    jacobian_error,
    random_feasible_iterates,
    run_verify,
    slope_constant,
    small_x_slope_excess,
)


class TestVerifyReport:
    """Counting and summary"""

    def test_counts(self):
        report = VerifyReport()
        report.check("newton_converged", True, 1e-12, 1e-10)
        report.check("forward_differences_negative", False, 0.1, 0.0)
        report.add_skip("density_normalized", "sigma = 0")

        summary = report.get_summary()
        assert (summary["total"], summary["passed"], summary["failed"], summary["skipped"]) == (3, 1, 1, 1)
        assert summary["errors"] == ["forward_differences_negative"]
        assert summary["pass_rate"] == "33.3%"
        assert not report.ok

    def test_empty_summary(self):
        assert VerifyReport().get_summary()["pass_rate"] == "0%"

    def test_skip_rest_completes_schema(self):
        report = VerifyReport()
        report.add_pass("audit_consistency")
        report.skip_rest("not reached")
        model = report.to_model()
        assert [c.name for c in model.checks] == list(CHECKS)
        assert model.checks[-1].status == "PASSED"

    def test_fail_rest_only_touches_pending(self):
        report = VerifyReport()
        report.add_pass("mc_value_agreement")
        report.fail_rest(MC_CHECKS, {"error": "NoEscapes"})
        assert report.failed == len(MC_CHECKS) - 1
        assert report.passed == 1


class TestHelpers:
    """Diagnostics computed from a converged solution"""

    def test_analytic_jacobian_matches_finite_differences(self, coarse_solution):
        s = coarse_solution
        for v in random_feasible_iterates(s, 3, seed=1):
            assert jacobian_error(v, s.grid, s.params, s.closure) < 1e-6

    def test_perturbed_iterates_stay_feasible(self, coarse_solution):
        for v in random_feasible_iterates(coarse_solution, 5, seed=2):
            assert np.all(np.diff(v) < 0)

    def test_slope_constant_positive(self, default_solution):
        assert slope_constant(default_solution) > 0

    def test_small_x_slope_bound(self, default_solution):
        assert small_x_slope_excess(default_solution) <= 10 * default_solution.grid.dx


class TestRunVerify:
    """End to end"""

    def test_zero_sigma_skips_density_and_mc(self):
        """every path is the same at sigma = 0, so an ensemble says nothing"""
        cfg = RunConfig(command="verify", params=LakeParams(sigma=0.0), grid=GridSection(n=1000),
                        sim={"n_paths": 4, "dt": 1e-2})
        model = run_verify(cfg).to_model()
        status = {c.name: c.status for c in model.checks}
        assert [c.name for c in model.checks] == list(CHECKS)
        assert all(status[name] == "SKIPPED" for name in DENSITY_CHECKS + MC_CHECKS)
        assert status["newton_converged"] == "PASSED"

    def test_unconverged_solve_skips_the_rest(self):
        cfg = RunConfig(command="verify", grid=GridSection(n=400), solver={"max_iter": 1})
        report = run_verify(cfg)
        status = {c.name: c.status for c in report.to_model().checks}
        assert status["newton_converged"] == "FAILED"
        assert status["audit_consistency"] == "SKIPPED"
        assert report.total == len(CHECKS)

    def test_mc_error_fails_only_mc_checks(self, monkeypatch):
        def out_of_range(*args, **kwargs):
            raise DriftEvaluationOutOfRange("path left the drift table", step=3)

        monkeypatch.setattr(verify, "estimate_value_mc", out_of_range)
        cfg = RunConfig(command="verify", grid=GridSection(n=1000), sim={"n_paths": 2, "dt": 1e-2})
        report = run_verify(cfg)
        checks = {c.name: c for c in report.to_model().checks}
        assert report.total == len(CHECKS)
        for name in MC_CHECKS:
            assert checks[name].status == "FAILED"
            assert checks[name].detail["error"] == "DriftEvaluationOutOfRange"
        assert checks["audit_consistency"].status != "SKIPPED"

    @pytest.mark.slow
    def test_default_point_passes(self):
        """Solver and density checks at b=0.65, c=0.5, rho=0.03, sigma=0.1"""
        cfg = RunConfig(command="verify", jobs=4)
        report = run_verify(cfg)
        assert report.ok, report.get_summary()["errors"]


class TestAuditLogger:
    """Audit entries and the recompute-and-compare check"""

    def test_solution_is_consistent(self, default_solution):
        result = audit_logger.validate_consistency(default_solution)
        assert result["valid"], result["issues"]

    def test_solve_entry_written_to_file(self, coarse_solution, tmp_path):
        log_file = tmp_path / "audit.jsonl"
        entry = AuditLogger(log_file=str(log_file), enable_file_logging=True).log_solve(coarse_solution)
        assert entry["grid"]["n"] == 200
        assert entry["residual_norm"] <= 1e-10

        lines = log_file.read_text().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["closure"] == "slope"
