"""
Shallow Lake Solver Tests
=========================
Grid admissibility, the discrete HJB system, Newton and the structural
bounds every converged solution must satisfy.
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from errors import (
    DegenerateQuadratic,
    GridSpecError,
    MaxIterationsExceeded,
    MonotonicityViolation,
    NonnegativeForwardDifference,
)
from models import LakeParams, RecyclingRate, asymptotic_slope, asymptotic_value, derived_constants, validate_params
from solver import (
    Closure,
    asymptotic_gap,
    asymptotic_guess,
    build_grid,
    complete,
    initial_guess,
    jacobian,
    policy_from_solution,
    residual,
    right_boundary_value,
    solve_params,
)
from verify import bracket_spread, jacobian_error, random_feasible_iterates, slope_constant, small_x_slope_excess

REFERENCE_SETS = [(0.65, 1.0, 0.03), (0.65, 0.5, 0.03), (0.8, 0.5, 0.03), (0.65, 0.512, 0.03)]


def interior_jump(s):
    """Largest step of the nodal policy between neighbours away from both ends, and where it sits"""
    mid = s.x[:-1] + s.grid.dx / 2
    steps = np.abs(np.diff(s.policy))
    inner = (mid[:-1] > 0.1) & (mid[:-1] < 0.9 * s.grid.l)
    k = int(np.argmax(np.where(inner, steps, 0.0)))
    return float(steps[k]), float(mid[k])


class TestGrid:
    """Uniform grid and the monotonicity condition"""

    def test_default_grid(self, default_params):
        g = build_grid(validate_params(default_params))
        assert g.n == 4000
        assert g.l == pytest.approx(4 / 0.68 + 2)
        assert g.x[0] == 0.0 and g.x[-1] == pytest.approx(g.l)
        assert g.dx == pytest.approx(g.l / g.n)

    def test_grid_is_read_only(self, default_params):
        g = build_grid(validate_params(default_params), n=100)
        with pytest.raises(ValueError):
            g.x[0] = 1.0

    @pytest.mark.parametrize("l,n", [(0.0, 100), (-1.0, 100), (math.inf, 100), (5.0, 7)])
    def test_degenerate_requests(self, default_params, l, n):
        with pytest.raises(GridSpecError):
            build_grid(validate_params(default_params), l=l, n=n)

    def test_monotonicity_violation_reports_min_n(self):
        """b=0.3: r(x) - b x peaks near 0.24, so dx must stay below sigma^2/2 / 0.24"""
        p = validate_params(LakeParams(b=0.3, sigma=0.1))
        with pytest.raises(MonotonicityViolation) as exc:
            build_grid(p, l=8.0, n=100)
        min_n = exc.value.detail["min_n"]
        assert min_n is not None and min_n > 100
        build_grid(p, l=8.0, n=min_n + 1)

    def test_sigma_zero_needs_r_below_bx(self):
        p = validate_params(LakeParams(b=0.3, sigma=0.0))
        with pytest.raises(MonotonicityViolation) as exc:
            build_grid(p, l=8.0, n=4000)
        assert exc.value.detail["min_n"] is None
        assert exc.value.exit_code == 3

    def test_sigma_zero_allowed_for_large_b(self):
        """r(x) <= x/2 < 0.65 x for the standard rate"""
        build_grid(validate_params(LakeParams(b=0.65, sigma=0.0)), n=4000)

    def test_right_boundary_symbolic(self):
        """A = 1/2, a = 0, K = 0, rho = 1, l = 1: the logarithm vanishes"""
        assert asymptotic_value(1.0, 0.5, 0.0, 1.0, 0.0) == pytest.approx(-0.5)

    def test_right_boundary_value(self, default_params):
        p = validate_params(default_params)
        A = 0.5 / (0.03 + 1.3 - 0.01)
        X = 4.0 + p.a / 0.68
        K = derived_constants(p).K
        expected = -A * X ** 2 - math.log(2 * A * X) / 0.03 + K
        assert right_boundary_value(p, 4.0) == pytest.approx(expected, rel=1e-12)
        assert right_boundary_value(p, 8.0) < right_boundary_value(p, 4.0)


class TestDiscreteSystem:
    """Residual, closures and the analytic Jacobian"""

    def test_row_zero(self, coarse_solution):
        """F_0 = V_0 + (1 + ln q_0)/rho"""
        s = coarse_solution
        v = np.array(s.v)
        v[0] += 0.01
        F = residual(v, s.grid, s.params)
        q0 = -(v[1] - v[0]) / s.grid.dx
        assert F[0] == pytest.approx(v[0] + (1 + math.log(q0)) / s.params.rho, rel=1e-12)

    def test_nonnegative_difference_rejected(self, coarse_solution):
        s = coarse_solution
        v = np.array(s.v)
        v[10] = v[9]
        with pytest.raises(NonnegativeForwardDifference) as exc:
            residual(v, s.grid, s.params)
        assert exc.value.detail["index"] == 9

    def test_slope_closure(self, coarse_solution):
        s = coarse_solution
        k = s.constants
        full = complete(s.v[:-1], s.grid, s.params, Closure.SLOPE)
        assert full[-1] - full[-2] == pytest.approx(s.grid.dx * asymptotic_slope(s.grid.l, k.A, k.alpha, s.params.rho))

    def test_dirichlet_closure(self, coarse_solution):
        s = coarse_solution
        full = complete(s.v[:-1], s.grid, s.params, Closure.DIRICHLET)
        assert full[-1] == right_boundary_value(s.params, s.grid.l)

    def test_accepts_n_or_n_plus_one_values(self, coarse_solution):
        s = coarse_solution
        assert np.array_equal(residual(s.v, s.grid, s.params), residual(s.v[:-1], s.grid, s.params))
        with pytest.raises(ValueError):
            residual(s.v[:-2], s.grid, s.params)

    def test_jacobian_matches_finite_differences(self, coarse_solution):
        """10 random feasible iterates, row-relative error < 1e-6"""
        s = coarse_solution
        for v in random_feasible_iterates(s, 10, seed=7):
            err = jacobian_error(v, s.grid, s.params, Closure.SLOPE)
            assert err < 1e-6, f"jacobian mismatch {err:.3e}"

    def test_jacobian_dirichlet_closure(self):
        params = LakeParams(b=0.8, c=0.06, rho=0.5, sigma=0.1, rate=RecyclingRate.tanh3())
        s = solve_params(params, n=200, closure=Closure.DIRICHLET)
        for v in random_feasible_iterates(s, 10, seed=11):
            err = jacobian_error(v, s.grid, s.params, Closure.DIRICHLET)
            assert err < 1e-6, f"jacobian mismatch {err:.3e}"

    def test_jacobian_diagonal_dominates_offdiagonals(self, coarse_solution):
        """Under the monotonicity condition the rows are diagonally dominant"""
        s = coarse_solution
        J = jacobian(s.v, s.grid, s.params)
        off = np.zeros_like(J.diag)
        off[:-1] += np.abs(J.sup)
        off[1:] += np.abs(J.sub)
        assert np.all(J.diag >= off)


class TestInitialGuess:

    def test_quadratic_guess_decreasing(self, default_params):
        p = validate_params(default_params)
        g = build_grid(p)
        guess = initial_guess(g, p, Closure.SLOPE)
        assert np.all(np.diff(guess) < 0)
        assert guess[0] == pytest.approx(derived_constants(p).v0_upper)

    def test_dirichlet_anchor_above_v0_is_degenerate(self, default_params):
        """At rho = 0.03 the pinned boundary value lies far above V(0)"""
        p = validate_params(default_params)
        g = build_grid(p)
        assert right_boundary_value(p, g.l) > derived_constants(p).v0_upper
        with pytest.raises(DegenerateQuadratic):
            initial_guess(g, p, Closure.DIRICHLET)

    def test_asymptotic_guess_decreasing(self, default_params):
        p = validate_params(default_params)
        g = build_grid(p, n=500)
        guess = asymptotic_guess(g, p)
        assert np.all(np.diff(guess) < 0)
        assert guess[0] == pytest.approx(derived_constants(p).v0_upper)


class TestSolve:
    """Newton convergence and the invariants of converged solutions"""

    def test_converges(self, default_solution):
        s = default_solution
        assert s.residual_norm <= 1e-10
        assert s.newton_iters <= 60
        assert s.v.size == s.grid.n + 1

    def test_forward_differences_negative(self, default_solution):
        assert np.all(np.diff(default_solution.v) < 0)
        assert np.all(default_solution.policy > 0)

    def test_value_plus_quadratic_decreasing(self, default_solution):
        s = default_solution
        assert np.all(np.diff(s.v + s.constants.A * s.x ** 2) < 0)

    def test_v0_upper_bound(self, default_solution):
        s = default_solution
        assert s.v[0] <= s.constants.v0_upper + 10 * s.grid.dx

    def test_boundary_identity(self, default_solution):
        """ln(-(V1 - V0)/dx) + rho V0 + 1 = 0"""
        s = default_solution
        identity = math.log(-(s.v[1] - s.v[0]) / s.grid.dx) + s.params.rho * s.v[0] + 1
        assert abs(identity) <= 1e-7

    def test_small_x_slope_bound(self, default_solution):
        assert small_x_slope_excess(default_solution) <= 10 * default_solution.grid.dx

    def test_outputs_are_read_only(self, default_solution):
        with pytest.raises(ValueError):
            default_solution.v[0] = 0.0
        with pytest.raises(ValueError):
            default_solution.policy[0] = 1.0

    def test_bitwise_reproducible(self, default_params, default_solution):
        again = solve_params(default_params)
        assert np.array_equal(again.v, default_solution.v)
        assert again.newton_iters == default_solution.newton_iters

    def test_max_iterations_carries_best_iterate(self, default_params):
        with pytest.raises(MaxIterationsExceeded) as exc:
            solve_params(default_params, n=400, max_iter=1)
        assert exc.value.best_v is not None and exc.value.best_v.size == 401
        assert math.isfinite(exc.value.norm)

    def test_summary_keys(self, default_solution):
        assert set(default_solution.summary()) == {
            "closure", "residual_norm", "residual_abs", "newton_iters", "V0", "VN", "boundary_value", "asymptotic_residual",
            "policy_jump_at_l",
        }

    @pytest.mark.parametrize("b,c,rho", REFERENCE_SETS)
    @pytest.mark.parametrize("sigma", [0.05, 0.1, 0.2])
    def test_reference_parameter_sets(self, b, c, rho, sigma):
        s = solve_params(LakeParams(b=b, c=c, rho=rho, sigma=sigma))
        assert s.residual_norm <= 1e-10
        assert s.newton_iters <= 60
        assert np.all(np.diff(s.v) < 0)

    def test_dirichlet_closure_converges(self):
        """With rho = 0.5 the asymptote is reached well inside the default grid"""
        params = LakeParams(b=0.8, c=0.06, rho=0.5, sigma=0.1, rate=RecyclingRate.tanh3())
        s = solve_params(params, closure=Closure.DIRICHLET)
        assert s.residual_norm <= 1e-10
        assert s.v[-1] == pytest.approx(s.boundary_value)
        assert np.all(np.diff(s.v) < 0)

    def test_sigma_zero_solve(self):
        s = solve_params(LakeParams(sigma=0.0), n=2000)
        assert s.residual_norm <= 1e-10
        assert np.all(np.diff(s.v) < 0)

    def test_sigma_zero_policy_keeps_its_jump(self):
        """c = 0.5: the deterministic policy jumps near x = 0.8 at every resolution; c = 1 stays smooth"""
        params = LakeParams(b=0.65, c=0.5, rho=0.03, sigma=0.0)
        coarse, _ = interior_jump(solve_params(params, n=2000))
        fine, where = interior_jump(solve_params(params, n=4000))
        assert fine >= 0.9 * coarse, f"jump {coarse:.4f} -> {fine:.4f}"
        assert 0.3 < where < 1.5

        smooth, _ = interior_jump(solve_params(LakeParams(b=0.65, c=1.0, rho=0.03, sigma=0.0), n=4000))
        assert fine > 3 * smooth, f"c=0.5 jump {fine:.4f}, c=1 jump {smooth:.4f}"


class TestRefinement:
    """Grid refinement behaviour"""

    def test_self_convergence_first_order(self, solve_on):
        params = LakeParams(b=0.65, c=1.0, rho=0.03, sigma=0.2)
        v = {n: solve_on(params, l=4 / 0.68 + 2, n=n).v for n in (1000, 2000, 4000)}
        e1 = np.max(np.abs(v[1000] - v[2000][::2]))
        e2 = np.max(np.abs(v[2000] - v[4000][::2]))
        assert e1 / e2 >= 1.8, f"refinement ratio {e1 / e2:.3f}"

    def test_bracket_and_slope_stable(self, default_params, default_solution, solve_on):
        fine = solve_on(default_params, l=default_solution.grid.l, n=2 * default_solution.grid.n)
        spread, spread_fine = bracket_spread(default_solution), bracket_spread(fine)
        assert abs(spread_fine - spread) / spread < 0.05
        c1, c1_fine = slope_constant(default_solution), slope_constant(fine)
        assert c1 > 0
        assert abs(c1_fine - c1) / c1 <= 0.2

    def test_asymptotic_residual_shrinks_with_l(self, default_params, default_solution, solve_on):
        """n / l fixed"""
        g = default_solution.grid
        wide = solve_on(default_params, l=2 * g.l, n=2 * g.n)
        assert wide.asymptotic_residual < default_solution.asymptotic_residual

    def test_asymptotic_gap_on_tail(self, default_solution):
        s = default_solution
        gap = asymptotic_gap(s)
        tail = s.x >= 0.95 * s.grid.l
        assert gap.shape == s.v.shape
        assert np.max(np.abs(gap[tail])) == pytest.approx(s.asymptotic_residual)

    def test_small_noise_stability(self, solve_on):
        """Solutions at sigma 0.05 / 0.025 are closer than at 0.2 / 0.1"""
        v = {sigma: solve_on(LakeParams(b=0.65, c=0.5, rho=0.03, sigma=sigma), l=7.0, n=2000).v
             for sigma in (0.2, 0.1, 0.05, 0.025)}
        assert np.max(np.abs(v[0.05] - v[0.025])) < np.max(np.abs(v[0.2] - v[0.1]))


class TestRecyclingRobustness:
    """Steep tanh rates approach the step solution"""

    def test_half_tanh_converges_to_step(self, step_solution):
        gaps = {}
        for a in (1.0, 2.0, 4.0, 8.0):
            s = solve_params(LakeParams(rate=RecyclingRate.half_tanh(a)), l=step_solution.grid.l)
            assert s.residual_norm <= 1e-10
            gaps[a] = float(np.max(np.abs(s.v - step_solution.v)))
        assert gaps[8.0] < gaps[1.0], f"gaps: {gaps}"

    def test_step_solution_converges(self, step_solution):
        assert step_solution.residual_norm <= 1e-10
        assert step_solution.params.warnings


class TestPolicy:

    def test_interpolant_at_midpoints(self, coarse_solution):
        policy, interp = policy_from_solution(coarse_solution)
        assert np.allclose(interp(interp.mid), policy, rtol=1e-12)

    def test_interpolant_beyond_l_follows_asymptote(self, coarse_solution):
        _, interp = policy_from_solution(coarse_solution)
        k = coarse_solution.constants
        x = np.array([2.0, 10.0, 100.0]) * coarse_solution.grid.l
        expected = -1.0 / asymptotic_slope(x, k.A, k.alpha, coarse_solution.params.rho)
        assert np.allclose(interp(x), expected)

    def test_policy_at_zero_matches_boundary_identity(self, default_solution):
        """u_0 = exp(rho V_0 + 1)"""
        s = default_solution
        assert s.policy[0] == pytest.approx(math.exp(s.params.rho * s.v[0] + 1.0), rel=1e-6)

    def test_policy_jump_at_l_is_reported(self, default_solution):
        s = default_solution
        _, interp = policy_from_solution(s)
        l = s.grid.l
        assert s.policy_jump_at_l > 0
        assert s.policy_jump_at_l == pytest.approx(abs(interp(l * (1 + 1e-12)) - interp(l)), rel=1e-6)
