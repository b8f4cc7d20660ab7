"""
Shallow Lake Verify
===================
Runs the named invariants of the solver, the invariant density and the
Monte Carlo cross-checks as one report.

Every run produces the same check names in the same order; a check that
cannot run is SKIPPED with a reason, never dropped.

USAGE:
    python run.py verify [--config FILE] [--paths N] ...
"""

import logging
import math
from typing import Dict, List, Optional

import numpy as np

from audit_logger import audit_logger
from errors import NumericalError
from invariant import invariant_density
from models import validate_params
from schemas import CheckResult, RunConfig, VerifyReportModel
from sde import FeedbackPolicy, estimate_value_mc, occupation_check, truncated_policy_value, truncation_bound
from solver import Grid, ValueSolution, build_grid, jacobian, residual, solve

logger = logging.getLogger(__name__)

CHECKS = (
    "newton_converged",
    "forward_differences_negative",
    "value_plus_quadratic_decreasing",
    "v0_upper_bound",
    "boundary_identity",
    "bracket_bounded",
    "slope_bound_stable",
    "small_x_slope_bound",
    "asymptotic_residual",
    "jacobian_finite_difference",
    "density_normalized",
    "density_right_tail_exponent",
    "density_left_tail_limit",
    "mc_value_agreement",
    "feedback_dominance",
    "truncation_sandwich",
    "occupation_consistency",
    "audit_consistency",
)

SOLVE_CHECKS = CHECKS[:10]
DENSITY_CHECKS = CHECKS[10:13]
MC_CHECKS = CHECKS[13:16]

BOUNDARY_TOL = 1e-7
BRACKET_RTOL = 0.05
SLOPE_RTOL = 0.20
SMALL_X = 0.1
JACOBIAN_RTOL = 1e-6
JACOBIAN_ITERATES = 10
NORMALIZATION_TOL = 1e-6
TAIL_EXPONENT_RTOL = 0.02
LEFT_LIMIT_RTOL = 0.05
OCCUPATION_KS = 0.05
OCCUPATION_MIN_HORIZON = 1e4


class VerifyReport:
    """Stores verify results"""

    def __init__(self):
        self.total = 0
        self.passed = 0
        self.failed = 0
        self.skipped = 0
        self.errors = []
        self.checks: List[CheckResult] = []

    def add_pass(self, name: str, measured=None, threshold=None, **detail):
        self.total += 1
        self.passed += 1
        self.checks.append(CheckResult(name=name, status="PASSED", measured=measured, threshold=threshold, detail=detail))
        logger.info(f"[VERIFY] {name}: PASSED (measured={measured}, threshold={threshold})")

    def add_fail(self, name: str, measured=None, threshold=None, **detail):
        self.total += 1
        self.failed += 1
        self.errors.append(name)
        self.checks.append(CheckResult(name=name, status="FAILED", measured=measured, threshold=threshold, detail=detail))
        logger.warning(f"[VERIFY] {name}: FAILED (measured={measured}, threshold={threshold})")

    def add_skip(self, name: str, reason: str):
        self.total += 1
        self.skipped += 1
        self.checks.append(CheckResult(name=name, status="SKIPPED", detail={"reason": reason}))
        logger.info(f"[VERIFY] {name}: SKIPPED ({reason})")

    def check(self, name: str, ok: bool, measured=None, threshold=None, **detail):
        if ok:
            self.add_pass(name, measured, threshold, **detail)
        else:
            self.add_fail(name, measured, threshold, **detail)

    def skip_rest(self, reason: str):
        done = {c.name for c in self.checks}
        for name in CHECKS:
            if name not in done:
                self.add_skip(name, reason)

    def fail_rest(self, names, error: Dict):
        done = {c.name for c in self.checks}
        for name in names:
            if name not in done:
                self.add_fail(name, None, None, **error)

    @property
    def ok(self) -> bool:
        return self.failed == 0

    def get_summary(self) -> Dict:
        return {
            "total": self.total,
            "passed": self.passed,
            "failed": self.failed,
            "skipped": self.skipped,
            "pass_rate": f"{(self.passed / self.total) * 100:.1f}%" if self.total > 0 else "0%",
            "errors": self.errors,
        }

    def to_model(self) -> VerifyReportModel:
        order = {name: k for k, name in enumerate(CHECKS)}
        checks = sorted(self.checks, key=lambda c: order.get(c.name, len(order)))
        return VerifyReportModel(summary=self.get_summary(), checks=checks)


# ═══════════════════════════════════════════════════════════════════════
# HELPERS
# ═══════════════════════════════════════════════════════════════════════

def bracket_spread(s: ValueSolution) -> float:
    """max - min of V + A (x + alpha)^2 + ln(x + alpha) / rho over the grid"""
    k = s.constants
    X = s.x + k.alpha
    keep = X > 0
    E = s.v[keep] + k.A * X[keep] ** 2 + np.log(X[keep]) / s.params.rho
    return float(np.max(E) - np.min(E))


def slope_constant(s: ValueSolution) -> float:
    """C1 = min_i -(V_{i+1} - V_i) / dx"""
    return float(np.min(-s.dV))


def small_x_slope_excess(s: ValueSolution, eps: float = SMALL_X) -> float:
    """max over x_{i+1} <= eps of (V_{i+1} - V_i)/dx + 1 / (exp(rho V_i + 1 + c x_{i+1}^2) + rho x_i)"""
    p, x = s.params, s.x
    i = np.nonzero(x[1:] <= eps)[0]
    if i.size == 0:
        i = np.array([0])
    bound = 1.0 / (np.exp(p.rho * s.v[i] + 1.0 + p.c * x[i + 1] ** 2) + p.rho * x[i])
    return float(np.max(s.dV[i] + bound))


def finite_difference_jacobian(v: np.ndarray, g: Grid, p, closure, h: float):
    """
    Central differences of the residual, tridiagonal part only.
    Columns j = k mod 3 are perturbed together, so six residual
    evaluations recover all three bands.
    """
    u = np.asarray(v, dtype=float)[: g.n]
    n = u.size
    diag, sub, sup = np.zeros(n), np.zeros(n - 1), np.zeros(n - 1)
    for color in range(3):
        cols = np.arange(color, n, 3)
        e = np.zeros(n)
        e[cols] = h
        dF = (residual(u + e, g, p, closure) - residual(u - e, g, p, closure)) / (2 * h)
        diag[cols] = dF[cols]
        below = cols[cols + 1 < n]
        sub[below] = dF[below + 1]
        above = cols[cols >= 1]
        sup[above - 1] = dF[above - 1]
    return sub, diag, sup


def jacobian_error(v: np.ndarray, g: Grid, p, closure, h: Optional[float] = None) -> float:
    """Largest row-relative gap between the analytic and the finite-difference Jacobian"""
    J = jacobian(v, g, p, closure)
    if h is None:
        q = -np.diff(np.asarray(v, dtype=float)[: g.n]) / g.dx
        h = 1e-4 * g.dx * float(np.min(q)) if q.size else 1e-4 * g.dx
    sub, diag, sup = finite_difference_jacobian(v, g, p, closure, h)

    row_scale = np.abs(J.diag).copy()
    row_scale[:-1] = np.maximum(row_scale[:-1], np.abs(J.sup))
    row_scale[1:] = np.maximum(row_scale[1:], np.abs(J.sub))

    gap = np.abs(diag - J.diag)
    gap[:-1] = np.maximum(gap[:-1], np.abs(sup - J.sup))
    gap[1:] = np.maximum(gap[1:], np.abs(sub - J.sub))
    return float(np.max(gap / row_scale))


def random_feasible_iterates(s: ValueSolution, count: int, seed: int) -> List[np.ndarray]:
    """Perturbations of the solution that keep every forward difference negative"""
    rng = np.random.default_rng(seed)
    u = np.asarray(s.v[:-1])
    amp = 0.25 * s.grid.dx * float(np.min(s.policy))
    return [u + amp * rng.uniform(-1.0, 1.0, u.size) for _ in range(count)]


# ═══════════════════════════════════════════════════════════════════════
# RUN
# ═══════════════════════════════════════════════════════════════════════

def _solve_checks(report: VerifyReport, cfg: RunConfig, s: ValueSolution, p) -> None:
    g, k = s.grid, s.constants
    solve_kw = dict(tol=cfg.solver.tol, max_iter=cfg.solver.max_iter, closure=cfg.grid.closure)

    report.check("newton_converged", s.residual_norm <= cfg.solver.tol, s.residual_norm, cfg.solver.tol,
                 newton_iters=s.newton_iters, residual_abs=s.residual_abs)

    worst = float(np.max(np.diff(s.v)))
    report.check("forward_differences_negative", worst < 0, worst, 0.0)

    shifted = float(np.max(np.diff(s.v + k.A * s.x ** 2)))
    report.check("value_plus_quadratic_decreasing", shifted < 0, shifted, 0.0)

    limit = k.v0_upper + 10 * g.dx
    report.check("v0_upper_bound", s.v[0] <= limit, float(s.v[0]), limit, v0_upper=k.v0_upper)

    identity = abs(math.log(-(s.v[1] - s.v[0]) / g.dx) + p.rho * s.v[0] + 1.0)
    report.check("boundary_identity", identity <= BOUNDARY_TOL, identity, BOUNDARY_TOL)

    fine = solve(build_grid(p, g.l, 2 * g.n), p, **solve_kw)
    spread, spread_fine = bracket_spread(s), bracket_spread(fine)
    change = abs(spread_fine - spread) / max(abs(spread), 1e-300)
    report.check("bracket_bounded", change < BRACKET_RTOL, change, BRACKET_RTOL, spread=spread, spread_fine=spread_fine)

    c1, c1_fine = slope_constant(s), slope_constant(fine)
    drift = abs(c1_fine - c1) / c1 if c1 > 0 else math.inf
    report.check("slope_bound_stable", c1 > 0 and drift <= SLOPE_RTOL, drift, SLOPE_RTOL, C1=c1, C1_fine=c1_fine)

    excess = small_x_slope_excess(s)
    report.check("small_x_slope_bound", excess <= 10 * g.dx, excess, 10 * g.dx, eps=SMALL_X)

    wide = solve(build_grid(p, 2 * g.l, 2 * g.n), p, **solve_kw)
    report.check(
        "asymptotic_residual", wide.asymptotic_residual < s.asymptotic_residual,
        wide.asymptotic_residual, s.asymptotic_residual,
        at_l=s.asymptotic_residual, at_2l=wide.asymptotic_residual, absolute_bound_met=s.asymptotic_residual < 1e-2,
    )

    errors = [jacobian_error(v, g, p, cfg.grid.closure) for v in random_feasible_iterates(s, JACOBIAN_ITERATES, cfg.sim.seed)]
    report.check("jacobian_finite_difference", max(errors) < JACOBIAN_RTOL, max(errors), JACOBIAN_RTOL, iterates=len(errors))


def _density_checks(report: VerifyReport, s: ValueSolution):
    d = invariant_density(s)
    diag = d.diagnostics
    # Z on the default mesh against Z on a mesh with half the log spacing
    fine = invariant_density(s, d.mesh.refined())
    z_change = abs(math.expm1(fine.log_Z - d.log_Z))
    report.check("density_normalized", z_change <= NORMALIZATION_TOL, z_change, NORMALIZATION_TOL,
                 log_Z=d.log_Z, log_Z_refined=fine.log_Z, quadrature_rel_change=diag["quadrature_rel_change"])

    fit, expected = diag["tail_exponent_fit"], diag["tail_exponent_expected"]
    rel = abs(fit - expected) / abs(expected)
    report.check("density_right_tail_exponent", rel <= TAIL_EXPONENT_RTOL, rel, TAIL_EXPONENT_RTOL, fit=fit, expected=expected)

    left = diag["left_limit"]
    report.check("density_left_tail_limit", left["rel_error"] <= LEFT_LIMIT_RTOL, left["rel_error"], LEFT_LIMIT_RTOL, **left)
    return d


def _mc_checks(report: VerifyReport, cfg: RunConfig, s: ValueSolution, p) -> None:
    sim, x0 = cfg.sim.sim_config(), cfg.sim.x0
    target = s.value_at(x0)
    kw = dict(bias_target=cfg.sim.bias, jobs=cfg.jobs)

    mc = estimate_value_mc(s, sim, x0, **kw)
    audit_logger.log_ensemble("optimal", x0, mc, sim.model_dump())
    gap = abs(mc.estimate - target)
    report.check("mc_value_agreement", gap <= 3 * mc.stderr + mc.bias, gap, 3 * mc.stderr + mc.bias,
                 estimate=mc.estimate, solver=target)

    fb = estimate_value_mc(s, sim, x0, policy=FeedbackPolicy(p), **kw)
    audit_logger.log_ensemble("feedback", x0, fb, sim.model_dump())
    report.check("feedback_dominance", fb.estimate <= target + 3 * fb.stderr, fb.estimate, target + 3 * fb.stderr)

    N = float(np.max(s.policy)) / 2
    capped = truncated_policy_value(s, N, sim, x0, **kw)
    audit_logger.log_ensemble("truncated", x0, capped, sim.model_dump())
    diff = target - capped.estimate
    lower = -3 * capped.stderr
    upper = truncation_bound(p, N) + 3 * capped.stderr + capped.bias
    report.check("truncation_sandwich", lower <= diff <= upper, diff, [lower, upper], N=N)


def run_verify(cfg: RunConfig) -> VerifyReport:
    """
    Validate, solve and run every named check.

    Raises:
        ParameterError: inadmissible parameters are refused before any check
    """
    p = validate_params(cfg.params)
    report = VerifyReport()

    try:
        s = solve(build_grid(p, cfg.grid.l, cfg.grid.n), p, tol=cfg.solver.tol,
                  max_iter=cfg.solver.max_iter, closure=cfg.grid.closure)
    except NumericalError as e:
        report.add_fail("newton_converged", getattr(e, "norm", None), cfg.solver.tol, **e.to_dict())
        report.skip_rest("solve failed")
        return report

    try:
        _solve_checks(report, cfg, s, p)
    except NumericalError as e:
        logger.warning(f"[VERIFY] refinement solve failed: {e.message}")
        report.fail_rest(SOLVE_CHECKS, e.to_dict())

    d = None
    if p.sigma > 0:
        try:
            d = _density_checks(report, s)
        except NumericalError as e:
            report.fail_rest(DENSITY_CHECKS, e.to_dict())
    else:
        for name in DENSITY_CHECKS:
            report.add_skip(name, "sigma = 0 has no invariant density")

    if p.sigma > 0 and cfg.sim.n_paths >= 2:
        try:
            _mc_checks(report, cfg, s, p)
        except NumericalError as e:
            logger.warning(f"[VERIFY] Monte Carlo checks failed: {e.message}")
            report.fail_rest(MC_CHECKS, e.to_dict())
    else:
        for name in MC_CHECKS:
            report.add_skip(name, "needs sigma > 0 and sim.paths >= 2")

    if d is not None and cfg.sim.horizon >= OCCUPATION_MIN_HORIZON:
        try:
            occ = occupation_check(s, d, cfg.sim.sim_config(), cfg.sim.x0, burn_in=cfg.sim.burn_in)
            report.check("occupation_consistency", occ.statistic < OCCUPATION_KS, occ.statistic, OCCUPATION_KS,
                         n_samples=occ.n_samples)
        except NumericalError as e:
            report.fail_rest(("occupation_consistency",), e.to_dict())
    else:
        report.add_skip("occupation_consistency", f"needs sigma > 0 and sim.horizon >= {OCCUPATION_MIN_HORIZON:g}")

    consistency = audit_logger.validate_consistency(s)
    report.check("audit_consistency", consistency["valid"], len(consistency["issues"]), 0, issues=consistency["issues"])

    report.skip_rest("not reached")
    logger.info(f"[VERIFY] {report.get_summary()}")
    return report
