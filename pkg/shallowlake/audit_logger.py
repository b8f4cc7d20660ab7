"""
Shallow Lake Audit Logger
=========================
Structured JSON audit trail for every finished computation.
Lets any emitted number be traced back to its parameters, grid and
convergence data.
"""

import json
import logging
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

import numpy as np

from errors import _jsonable
from settings import AUDIT_FILE, ENABLE_AUDIT_FILE
from solver import residual

logger = logging.getLogger(__name__)


class AuditLogger:
    """
    Structured logger for solves, densities, sweeps, ensembles and escapes.
    Every entry goes to the log as one JSON line; optionally to a JSONL file.
    """

    def __init__(self, log_file: Optional[str] = None, enable_file_logging: Optional[bool] = None):
        self.log_file = log_file or AUDIT_FILE
        self.enable_file_logging = ENABLE_AUDIT_FILE if enable_file_logging is None else enable_file_logging

    def _emit(self, tag: str, entry: Dict, level: int = logging.INFO) -> Dict:
        entry = {"timestamp_utc": datetime.now(timezone.utc).isoformat(), **_jsonable(entry)}
        logger.log(level, f"[{tag}] {json.dumps(entry, ensure_ascii=False)}")
        if self.enable_file_logging:
            self._write_to_file(entry)
        return entry

    def log_solve(self, s) -> Dict:
        """
        Audit entry of a converged solve.

        Returns:
            Dict with everything logged (for verification)
        """
        k = s.constants
        return self._emit("SOLVE_AUDIT", {
            "params": s.params.params.model_dump(),
            "grid": s.grid.spec(),
            "closure": s.closure.value,
            "residual_norm": s.residual_norm,
            "residual_abs": s.residual_abs,
            "newton_iters": s.newton_iters,
            "constants": {"A": k.A, "K": k.K, "v0_upper": k.v0_upper},
            "V0": float(s.v[0]),
            "VN": float(s.v[-1]),
            "asymptotic_residual": s.asymptotic_residual,
            "policy_jump_at_l": s.policy_jump_at_l,
        })

    def log_density(self, d, sigma: float) -> Dict:
        return self._emit("DENSITY_AUDIT", {
            "sigma": sigma,
            "points": int(d.x.size),
            "log_Z": d.log_Z,
            "modes": d.modes,
            "antimodes": d.antimodes,
            "labels": list(d.labels),
            "diagnostics": d.diagnostics,
        })

    def log_sweep(self, result) -> Dict:
        return self._emit("SWEEP_AUDIT", {
            "name": result.name,
            "values": result.values,
            "mode_counts": [len(pt.modes) for pt in result.points],
            "failed": result.failed,
        })

    def log_ensemble(self, label: str, x0: float, estimate, sim: Dict) -> Dict:
        return self._emit("ENSEMBLE_AUDIT", {"policy": label, "x0": x0, **estimate.summary(), "sim": sim})

    def log_escape(self, sample, sim: Dict) -> Dict:
        return self._emit("ESCAPE_AUDIT", {**sample.summary(), "sim": sim})

    def log_verify(self, summary: Dict) -> Dict:
        level = logging.INFO if summary.get("failed", 0) == 0 else logging.WARNING
        return self._emit("VERIFY_AUDIT", summary, level=level)

    def log_failure(self, component: str, error_type: str, error_details: str, partial_data: Optional[Dict] = None) -> Dict:
        """Failure entry (non-convergence, infeasible grid, censored run...)"""
        return self._emit("LAKE_FAILURE", {
            "component": component,
            "success": False,
            "error_type": error_type,
            "error_details": error_details,
            "partial_data": partial_data,
        }, level=logging.WARNING)

    def _write_to_file(self, log_entry: Dict):
        """Write log entry to JSONL file"""
        try:
            with open(self.log_file, "a", encoding="utf-8") as f:
                f.write(json.dumps(log_entry, ensure_ascii=False) + "\n")
        except Exception as e:
            logger.error(f"[AUDIT_LOGGER] Failed to write to file: {e}")

    def validate_consistency(self, s) -> Dict:
        """
        Recompute the residual and the structural invariants of a solution
        from its nodal values alone and compare with what it reports.

        CRITICAL: fail-fast check. If inconsistent, nothing downstream should use it.
        """
        issues: List[str] = []
        g, p = s.grid, s.params
        diffs = np.diff(s.v)

        if not np.all(diffs < 0):
            issues.append(f"forward difference not negative at index {int(np.argmax(diffs >= 0))}")
            return {"valid": False, "issues": issues, "expected": {}}

        F = residual(s.v, g, p, s.closure)
        recomputed_abs = float(np.max(np.abs(F)))
        recomputed_policy = -g.dx / diffs

        if abs(recomputed_abs - s.residual_abs) > max(1e-12, 1e-6 * s.residual_abs):
            issues.append(f"residual mismatch: got {s.residual_abs:.3e}, expected {recomputed_abs:.3e}")

        if not np.allclose(recomputed_policy, s.policy, rtol=1e-12, atol=0):
            issues.append("policy is not -dx / (V[i+1] - V[i])")

        if np.any(s.policy <= 0):
            issues.append("policy not strictly positive")

        shifted = s.v + s.constants.A * g.x ** 2
        if not np.all(np.diff(shifted) < 0):
            issues.append("V + A x^2 not strictly decreasing")

        return {
            "valid": len(issues) == 0,
            "issues": issues,
            "expected": {"residual_abs": recomputed_abs, "policy_0": float(recomputed_policy[0])},
        }


# Global instance
audit_logger = AuditLogger()
