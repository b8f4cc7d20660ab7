"""
Shallow Lake HJB Solver
=======================
Monotone finite-difference scheme for the stationary HJB equation

    rho V = sup_u { ln u - c x^2 + (u - b x + r(x)) V' } + sigma^2 x^2 V'' / 2

on a uniform grid 0 = x_0 < ... < x_n = l, solved by damped Newton.

Discretisation (row i = 0..n-1, q_i = -(V_{i+1} - V_i)/dx):
    F_i = V_i - (r_i - b x_i)(V_i - V_{i-1}) / (rho dx)
          + (c x_i^2 + 1 + ln q_i) / rho
          - sigma^2 x_i^2 (V_{i+1} + V_{i-1} - 2 V_i) / (2 rho dx^2)
Row 0 has x_0 = 0 and reduces to V_0 + (1 + ln q_0) / rho.

Right closures for V_n:
    slope      V_n = V_{n-1} + dx * asymptotic_slope(l)   (default)
    dirichlet  V_n = right_boundary_value(p, l)

GUARANTEES:
1. Every accepted iterate has strictly negative forward differences
2. Returned arrays are read-only
3. Same grid + params -> bitwise identical solution
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, solve_banded
from scipy.sparse import diags

from errors import (
    DegenerateQuadratic,
    GridSpecError,
    InfeasibleIterate,
    MaxIterationsExceeded,
    MonotonicityViolation,
    NonnegativeForwardDifference,
    SingularJacobian,
)
from models import (
    DerivedConstants,
    LakeParams,
    ValidatedParams,
    asymptotic_slope,
    asymptotic_value,
    default_right_endpoint,
    derived_constants,
    validate_params,
)

logger = logging.getLogger(__name__)

DEFAULT_N = 4000
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200
MIN_INTERVALS = 8
MAX_HALVINGS = 60
ARMIJO = 1e-4

# asymptotic residual is measured over the last TAIL_FRACTION of the nodes
TAIL_FRACTION = 0.05
TAIL_RESIDUAL_WARN = 1e-2


class Closure(str, Enum):
    SLOPE = "slope"
    DIRICHLET = "dirichlet"


def _readonly(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Grid:
    l: float
    n: int
    dx: float
    x: np.ndarray

    def spec(self) -> dict:
        return {"l": self.l, "n": self.n, "dx": self.dx}


@dataclass(frozen=True)
class Tridiagonal:
    """sub[i] = dF_{i+1}/dV_i, diag[i] = dF_i/dV_i, sup[i] = dF_i/dV_{i+1}"""

    sub: np.ndarray
    diag: np.ndarray
    sup: np.ndarray

    def banded(self) -> np.ndarray:
        n = self.diag.size
        ab = np.zeros((3, n))
        ab[0, 1:] = self.sup
        ab[1, :] = self.diag
        ab[2, :-1] = self.sub
        return ab

    def toarray(self) -> np.ndarray:
        return diags([self.sub, self.diag, self.sup], [-1, 0, 1]).toarray()


@dataclass(frozen=True)
class PolicyInterpolant:
    """
    Continuous feedback u(x) = -1 / V'(x).

    V' is known at the midpoints x_{i+1/2}; it is interpolated linearly,
    held constant outside the midpoints up to l, and follows the
    asymptotic slope beyond l.
    """

    mid: np.ndarray
    slope: np.ndarray
    l: float
    A: float
    alpha: float
    rho: float

    def derivative(self, x):
        xs = np.asarray(x, dtype=float)
        inside = np.interp(xs, self.mid, self.slope)
        beyond = asymptotic_slope(np.maximum(xs, self.l), self.A, self.alpha, self.rho)
        out = np.where(xs <= self.l, inside, beyond)
        return float(out) if np.ndim(x) == 0 else out

    def __call__(self, x):
        return -1.0 / self.derivative(x)


@dataclass(frozen=True)
class ValueSolution:
    grid: Grid
    params: ValidatedParams
    constants: DerivedConstants
    closure: Closure
    v: np.ndarray
    policy: np.ndarray
    residual_norm: float
    residual_abs: float
    newton_iters: int
    boundary_value: float
    asymptotic_residual: float
    policy_jump_at_l: float

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    @property
    def dV(self) -> np.ndarray:
        """Forward difference quotients (V_{i+1} - V_i)/dx, i = 0..n-1"""
        return np.diff(self.v) / self.grid.dx

    def value_at(self, x: float) -> float:
        return float(np.interp(x, self.grid.x, self.v))

    def summary(self) -> dict:
        return {
            "closure": self.closure.value,
            "residual_norm": self.residual_norm,
            "residual_abs": self.residual_abs,
            "newton_iters": self.newton_iters,
            "V0": float(self.v[0]),
            "VN": float(self.v[-1]),
            "boundary_value": self.boundary_value,
            "asymptotic_residual": self.asymptotic_residual,
            "policy_jump_at_l": self.policy_jump_at_l,
        }


# ═══════════════════════════════════════════════════════════════════════
# GRID
# ═══════════════════════════════════════════════════════════════════════

def build_grid(p: ValidatedParams, l: Optional[float] = None, n: int = DEFAULT_N) -> Grid:
    """
    Uniform grid on [0, l] with n intervals satisfying
    dx * (r(x) - b x) <= sigma^2 / 2 at every node.
    """
    if l is None:
        l = default_right_endpoint(p)
    if not math.isfinite(l) or l <= 0:
        raise GridSpecError(f"right endpoint must be finite and > 0, got {l}", l=l)
    if n < MIN_INTERVALS:
        raise GridSpecError(f"need at least {MIN_INTERVALS} intervals, got {n}", n=n)

    dx = l / n
    x = np.linspace(0.0, l, n + 1)
    drift = p.r(x) - p.b * x
    worst = int(np.argmax(drift))
    bound = p.sigma ** 2 / 2

    if dx * drift[worst] > bound:
        fine = np.union1d(x, np.linspace(0.0, l, 20001))
        peak = float(np.max(p.r(fine) - p.b * fine))
        min_n = None if bound == 0 else int(math.ceil(l * peak / bound))
        raise MonotonicityViolation(
            f"dx*(r(x)-bx) = {dx * drift[worst]:.3e} > sigma^2/2 = {bound:.3e} at x = {x[worst]:.4g}"
            + (" (sigma = 0 requires r(x) <= b x on [0, l])" if bound == 0 else f"; need n >= {min_n}"),
            worst_node=worst,
            x=float(x[worst]),
            value=float(dx * drift[worst]),
            bound=bound,
            min_n=min_n,
        )

    return Grid(l=float(l), n=int(n), dx=dx, x=_readonly(x))


def right_boundary_value(p: ValidatedParams, l: float) -> float:
    k = derived_constants(p)
    return asymptotic_value(l, k.A, k.alpha, p.rho, k.K)


# ═══════════════════════════════════════════════════════════════════════
# DISCRETE SYSTEM
# ═══════════════════════════════════════════════════════════════════════

def _coefficients(g: Grid, p: ValidatedParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = g.x[:-1]
    D = (p.r(x) - p.b * x) / (p.rho * g.dx)
    S = p.sigma ** 2 * x * x / (2 * p.rho * g.dx ** 2)
    const = (p.c * x * x + 1.0) / p.rho
    return D, S, const


def _unknowns(v: np.ndarray, g: Grid) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.size == g.n + 1:
        return v[:-1]
    if v.size != g.n:
        raise ValueError(f"expected {g.n} or {g.n + 1} nodal values, got {v.size}")
    return v


def complete(v: np.ndarray, g: Grid, p: ValidatedParams, closure: Closure = Closure.SLOPE) -> np.ndarray:
    """Append V_n from the right closure to the n unknowns"""
    u = _unknowns(v, g)
    k = derived_constants(p)
    if closure == Closure.DIRICHLET:
        vn = asymptotic_value(g.l, k.A, k.alpha, p.rho, k.K)
    else:
        vn = u[-1] + g.dx * asymptotic_slope(g.l, k.A, k.alpha, p.rho)
    return np.append(u, vn)


def _forward_rates(full: np.ndarray, g: Grid) -> np.ndarray:
    diff = np.diff(full)
    bad = np.nonzero(diff >= 0)[0]
    if bad.size:
        i = int(bad[0])
        raise NonnegativeForwardDifference(
            f"V[{i + 1}] - V[{i}] = {diff[i]:.3e} is not negative",
            index=i,
            difference=float(diff[i]),
        )
    return -diff / g.dx


def residual(v: np.ndarray, g: Grid, p: ValidatedParams, closure: Closure = Closure.SLOPE) -> np.ndarray:
    """F_0..F_{n-1} of the discrete HJB system; v holds n unknowns or n+1 nodes"""
    full = complete(v, g, p, closure)
    q = _forward_rates(full, g)
    D, S, const = _coefficients(g, p)
    n = g.n

    back = np.zeros(n)
    back[1:] = full[1:n] - full[:n - 1]
    second = np.zeros(n)
    second[1:] = full[2:] + full[:n - 1] - 2 * full[1:n]

    return full[:n] - D * back + const + np.log(q) / p.rho - S * second


def jacobian(v: np.ndarray, g: Grid, p: ValidatedParams, closure: Closure = Closure.SLOPE) -> Tridiagonal:
    full = complete(v, g, p, closure)
    q = _forward_rates(full, g)
    D, S, _ = _coefficients(g, p)

    w = 1.0 / (p.rho * g.dx * q)
    diag = 1.0 - D + 2 * S + w
    sup = -w[:-1] - S[:-1]
    sub = D[1:] - S[1:]

    if closure == Closure.SLOPE:
        # V_n moves with V_{n-1}: q_{n-1} is fixed, the second difference loses one -V_{n-1}
        diag[-1] = 1.0 - D[-1] + S[-1]

    return Tridiagonal(sub=sub, diag=diag, sup=sup)


# ═══════════════════════════════════════════════════════════════════════
# INITIAL GUESS
# ═══════════════════════════════════════════════════════════════════════

def initial_guess(g: Grid, p: ValidatedParams, closure: Closure = Closure.SLOPE) -> np.ndarray:
    """
    Quadratic V0 + beta x + kappa x^2 with
        V(0)   = v0_upper
        V(x_1) = v0_upper - dx * exp(-(rho v0_upper + 1))
        V(l)   = right_boundary_value (dirichlet) or the lower of it and
                 v0_upper - A l^2 (slope)
    Raises DegenerateQuadratic if a forward difference is not negative.
    """
    k = derived_constants(p)
    v0 = k.v0_upper
    m = math.exp(-(p.rho * v0 + 1.0))
    anchor = right_boundary_value(p, g.l)
    if closure == Closure.SLOPE:
        anchor = min(anchor, v0 - k.A * g.l ** 2)

    kappa = (anchor - v0 + m * g.l) / (g.l * (g.l - g.dx))
    beta = -m - kappa * g.dx
    guess = v0 + beta * g.x + kappa * g.x ** 2

    diff = np.diff(guess)
    if np.any(diff >= 0):
        i = int(np.argmax(diff >= 0))
        raise DegenerateQuadratic(
            f"quadratic guess has a nonnegative forward difference at index {i}",
            index=i, kappa=kappa, beta=beta, anchor=anchor,
        )
    return guess


def asymptotic_guess(g: Grid, p: ValidatedParams, closure: Closure = Closure.SLOPE) -> np.ndarray:
    """Fallback guess: the large-x asymptote evaluated on the grid (strictly decreasing)"""
    k = derived_constants(p)
    X = g.x + max(k.alpha, g.dx)
    values = -k.A * X * X - np.log(2 * k.A * X) / p.rho + k.K
    if closure == Closure.SLOPE:
        values = values - values[0] + k.v0_upper
    return values


# ═══════════════════════════════════════════════════════════════════════
# NEWTON
# ═══════════════════════════════════════════════════════════════════════

def _newton_step(J: Tridiagonal, F: np.ndarray) -> np.ndarray:
    try:
        step = solve_banded((1, 1), J.banded(), -F)
    except (LinAlgError, ValueError) as e:
        raise SingularJacobian(f"tridiagonal solve failed: {e}") from e
    if not np.all(np.isfinite(step)):
        raise SingularJacobian("tridiagonal solve returned non-finite values")
    return step


def _weighted_norm(v, g, p, closure, weights) -> float:
    return float(np.max(np.abs(residual(v, g, p, closure) * weights)))


def _damped_update(u, step, g, p, closure, delta, weights, norm0, iteration) -> Tuple[np.ndarray, float]:
    lam = 1.0
    for _ in range(MAX_HALVINGS + 1):
        trial = u + lam * step
        if np.all(np.diff(complete(trial, g, p, closure)) < -delta):
            break
        lam *= 0.5
    else:
        raise InfeasibleIterate(
            f"no step length restores negative forward differences after {MAX_HALVINGS} halvings",
            iteration=iteration, halvings=MAX_HALVINGS,
        )

    feasible = (trial, lam)
    for _ in range(MAX_HALVINGS):
        if _weighted_norm(trial, g, p, closure, weights) <= (1 - ARMIJO * lam) * norm0:
            return trial, lam
        lam *= 0.5
        trial = u + lam * step
    return feasible


def solve(
    g: Grid,
    p: ValidatedParams,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    closure: Closure = Closure.SLOPE,
) -> ValueSolution:
    """
    Damped Newton on the discrete HJB system.

    Convergence is declared on the Jacobi-scaled residual max |F_i| / J_ii.

    Raises:
        MaxIterationsExceeded: carries the best iterate and its norm
        InfeasibleIterate: damping cannot keep forward differences negative
        SingularJacobian
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    closure = Closure(closure)
    k = derived_constants(p)

    try:
        guess = initial_guess(g, p, closure)
    except DegenerateQuadratic as e:
        logger.warning(f"[SOLVER] {e.message}; falling back to the asymptotic guess")
        guess = asymptotic_guess(g, p, closure)

    u = guess[:-1].copy()
    delta = 1e-14 * max(abs(guess[-1]), 1.0) / g.l
    best_norm, best_u = math.inf, u.copy()

    logger.info(f"[SOLVER] n={g.n} l={g.l:.4g} closure={closure.value} sigma={p.sigma:g} tol={tol:g}")

    for it in range(max_iter + 1):
        F = residual(u, g, p, closure)
        J = jacobian(u, g, p, closure)
        weights = 1.0 / J.diag
        scaled = float(np.max(np.abs(F * weights)))

        if scaled < best_norm:
            best_norm, best_u = scaled, u.copy()

        if scaled <= tol:
            return _package(u, g, p, k, closure, scaled, float(np.max(np.abs(F))), it)
        if it == max_iter:
            break

        step = _newton_step(J, F)
        u, lam = _damped_update(u, step, g, p, closure, delta, weights, scaled, it)
        if lam < 1.0:
            logger.debug(f"[SOLVER] iteration {it}: damped step lambda={lam:.3e}")

    logger.warning(f"[SOLVER] no convergence after {max_iter} iterations, best norm={best_norm:.3e}")
    raise MaxIterationsExceeded(
        f"Newton did not reach tol={tol:g} in {max_iter} iterations (best {best_norm:.3e})",
        best_v=complete(best_u, g, p, closure),
        norm=best_norm,
        max_iter=max_iter,
    )


def _package(u, g, p, k, closure, scaled, absolute, iterations) -> ValueSolution:
    full = complete(u, g, p, closure)
    q = -np.diff(full) / g.dx
    tail = _asymptotic_residual(full, g, p, k)
    # nodal policy at l against the asymptotic feedback just beyond it
    jump = abs(1.0 / q[-1] + 1.0 / asymptotic_slope(g.l, k.A, k.alpha, p.rho))

    if tail > TAIL_RESIDUAL_WARN:
        logger.warning(
            f"[SOLVER] asymptotic residual {tail:.3e} over the last {TAIL_FRACTION:.0%} of nodes "
            f"exceeds {TAIL_RESIDUAL_WARN:g}; a larger l tightens the right closure"
        )
    logger.info(f"[SOLVER] converged in {iterations} iterations, scaled residual={scaled:.3e}, V0={full[0]:.6f}")

    return ValueSolution(
        grid=g,
        params=p,
        constants=k,
        closure=closure,
        v=_readonly(full),
        policy=_readonly(1.0 / q),
        residual_norm=scaled,
        residual_abs=absolute,
        newton_iters=iterations,
        boundary_value=asymptotic_value(g.l, k.A, k.alpha, p.rho, k.K),
        asymptotic_residual=tail,
        policy_jump_at_l=float(jump),
    )


def _asymptotic_residual(full: np.ndarray, g: Grid, p: ValidatedParams, k: DerivedConstants) -> float:
    mask = g.x >= (1 - TAIL_FRACTION) * g.l
    gap = full[mask] - asymptotic_value(g.x[mask], k.A, k.alpha, p.rho, k.K)
    return float(np.max(np.abs(gap)))


def asymptotic_gap(s: ValueSolution) -> np.ndarray:
    """V_i + A (x_i + alpha)^2 + ln(2A (x_i + alpha)) / rho - K at every node"""
    k = s.constants
    return s.v - asymptotic_value(s.x, k.A, k.alpha, s.params.rho, k.K)


# ═══════════════════════════════════════════════════════════════════════
# POLICY
# ═══════════════════════════════════════════════════════════════════════

def policy_from_solution(s: ValueSolution) -> Tuple[np.ndarray, PolicyInterpolant]:
    g = s.grid
    interp = PolicyInterpolant(
        mid=_readonly(g.x[:-1] + g.dx / 2),
        slope=_readonly(s.dV),
        l=g.l,
        A=s.constants.A,
        alpha=s.constants.alpha,
        rho=s.params.rho,
    )
    return s.policy, interp


def solve_params(
    params: LakeParams,
    l: Optional[float] = None,
    n: int = DEFAULT_N,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    closure: Closure = Closure.SLOPE,
) -> ValueSolution:
    """validate -> grid -> solve in one call"""
    p = validate_params(params)
    return solve(build_grid(p, l, n), p, tol=tol, max_iter=max_iter, closure=closure)
