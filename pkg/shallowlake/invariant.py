"""
Shallow Lake Invariant Density
==============================
Stationary density of the optimally controlled lake

    f(x) = x^(-2(1 + b/sigma^2)) exp(-2 Phi(x) / sigma^2) / Z
    Phi(x) = int_x^inf (u(s) + r(s)) / s^2 ds

its CDF, the transformation invariant I = sigma x f, the extrema of I
(stochastic attractors and regime-switching thresholds) and parameter
sweeps over sigma, c and rho.

Phi is integrated cell by cell with the numerator u + r taken piecewise
linear and 1/s^2 integrated exactly, on a log mesh from 1e-6 l to 100 l.
Beyond 100 l the asymptotic policy part is closed form and the
recycling part uses 64-point Gauss-Legendre in t = L/s.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.integrate import cumulative_trapezoid, simpson
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks

from errors import LakeError, NonpositiveParameter, NormalizationFailure
from models import LakeParams, RecyclingRate, recycling_eval
from solver import DEFAULT_MAX_ITER, DEFAULT_N, DEFAULT_TOL, Closure, ValueSolution, policy_from_solution, solve_params

logger = logging.getLogger(__name__)

GAUSS_POINTS = 64
PROMINENCE = 1e-10
LEFT_LIMIT_X = 1e-4
MERGE_FRACTION = 0.01
SWEEPABLE = ("sigma", "c", "rho")


class DensityMesh(BaseModel):
    """Evaluation mesh in units of the solver right endpoint l"""

    model_config = ConfigDict(frozen=True)

    x_min_factor: float = 1e-6
    points: int = 8000
    tail_factor: float = 100.0
    tail_points: int = 2000
    fit_from_factor: float = 50.0
    quadrature_rtol: float = 1e-4

    def refined(self) -> "DensityMesh":
        """Halves the log spacing; every point of this mesh stays a mesh point"""
        return self.model_copy(update={"points": 2 * self.points - 1, "tail_points": 2 * self.tail_points - 1})


@dataclass(frozen=True)
class DriftField:
    """
    Drift h(x) = u(x) - b x + r(x) of the controlled lake, together with
    the pieces Phi needs: u, r and the remainder integral beyond the mesh.
    """

    policy: Callable
    rate: Callable
    b: float
    sigma: float
    l: float
    tail: Callable[[float], float]

    def __call__(self, x):
        return self.policy(x) - self.b * np.asarray(x, dtype=float) + self.rate(x)

    @classmethod
    def from_solution(cls, s: ValueSolution) -> "DriftField":
        _, interp = policy_from_solution(s)
        p = s.params
        return cls(
            policy=interp,
            rate=p.r,
            b=p.b,
            sigma=p.sigma,
            l=s.grid.l,
            tail=partial(asymptotic_tail, A=s.constants.A, alpha=s.constants.alpha, rate=p.rate),
        )


@dataclass(frozen=True)
class InvariantDensity:
    x: np.ndarray
    f: np.ndarray
    F: np.ndarray
    I: np.ndarray
    log_Z: float
    modes: np.ndarray
    antimodes: np.ndarray
    labels: Tuple[str, ...]
    mesh: DensityMesh
    diagnostics: Dict

    @property
    def Z(self) -> float:
        return math.exp(self.log_Z) if self.log_Z < 700 else math.inf

    def cdf(self, x):
        return np.interp(x, self.x, self.F, left=0.0, right=1.0)

    def attractors(self) -> Dict[str, float]:
        return {label: float(m) for label, m in zip(self.labels, self.modes)}


@dataclass(frozen=True)
class SweepPoint:
    value: float
    modes: np.ndarray
    antimodes: np.ndarray
    diagnostics: Dict = field(default_factory=dict)
    error: Optional[Dict] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass(frozen=True)
class SweepResult:
    name: str
    values: np.ndarray
    points: Tuple[SweepPoint, ...]

    @property
    def partial(self) -> bool:
        return any(not pt.ok for pt in self.points)

    @property
    def failed(self) -> List[float]:
        return [pt.value for pt in self.points if not pt.ok]

    def rows(self) -> List[Dict]:
        rows = []
        for pt in self.points:
            for m in pt.modes:
                rows.append({"param": self.name, "value": pt.value, "kind": "mode", "location": float(m)})
            for m in pt.antimodes:
                rows.append({"param": self.name, "value": pt.value, "kind": "antimode", "location": float(m)})
        return rows


# ═══════════════════════════════════════════════════════════════════════
# PHI
# ═══════════════════════════════════════════════════════════════════════

def asymptotic_tail(L: float, A: float, alpha: float, rate: RecyclingRate) -> float:
    """int_L^inf (1/(2A(s + alpha)) + r(s)) / s^2 ds"""
    if alpha > 0:
        policy_part = (1.0 / (alpha * L) - math.log1p(alpha / L) / alpha ** 2) / (2 * A)
    else:
        policy_part = 1.0 / (4 * A * L ** 2)

    nodes, weights = np.polynomial.legendre.leggauss(GAUSS_POINTS)
    t = 0.5 * (nodes + 1.0)
    rate_part = 0.5 * float(np.dot(weights, recycling_eval(rate, L / t))) / L
    return policy_part + rate_part


def _cell_integrals(s: np.ndarray, numer: np.ndarray) -> np.ndarray:
    """int_{s_k}^{s_k+1} p(s) / s^2 ds with p linear on each cell"""
    s0, s1 = s[:-1], s[1:]
    p0, p1 = numer[:-1], numer[1:]
    w = (p1 - p0) / (s1 - s0)
    return (p0 - w * s0) * (1.0 / s0 - 1.0 / s1) + w * np.log(s1 / s0)


def _phi_on_mesh(drift: DriftField, mesh: np.ndarray) -> np.ndarray:
    numer = drift.policy(mesh) + drift.rate(mesh)
    cells = _cell_integrals(mesh, numer)
    phi = np.empty_like(mesh)
    phi[-1] = drift.tail(float(mesh[-1]))
    phi[:-1] = phi[-1] + np.cumsum(cells[::-1])[::-1]
    return phi


def _log_mesh(lo: float, hi: float, points: int) -> np.ndarray:
    return np.exp(np.linspace(math.log(lo), math.log(hi), points))


def phi_profile(drift: DriftField, x, mesh: DensityMesh = DensityMesh()) -> np.ndarray:
    """Phi at the points x > 0 for any drift field"""
    xq = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(~(xq > 0)):
        raise ValueError("Phi is defined for x > 0")

    L = mesh.tail_factor * drift.l
    out = np.empty_like(xq)
    beyond = xq >= L
    out[beyond] = [drift.tail(float(v)) for v in xq[beyond]]

    inner = xq[~beyond]
    if inner.size:
        lo = min(float(inner.min()), mesh.x_min_factor * drift.l)
        grid = np.union1d(
            np.concatenate([_log_mesh(lo, drift.l, mesh.points), _log_mesh(drift.l, L, mesh.tail_points)]),
            inner,
        )
        phi = _phi_on_mesh(drift, grid)
        out[~beyond] = phi[np.searchsorted(grid, inner)]

    return float(out[0]) if np.ndim(x) == 0 else out


def phi_sigma(s: ValueSolution, x, mesh: DensityMesh = DensityMesh()):
    return phi_profile(DriftField.from_solution(s), x, mesh)


# ═══════════════════════════════════════════════════════════════════════
# DENSITY
# ═══════════════════════════════════════════════════════════════════════

def density_mesh(s: ValueSolution, mesh: DensityMesh = DensityMesh()) -> np.ndarray:
    """Log mesh merged with the solver nodes; log points that crowd a node are dropped"""
    l = s.grid.l
    logs = np.concatenate([
        _log_mesh(mesh.x_min_factor * l, l, mesh.points),
        _log_mesh(l, mesh.tail_factor * l, mesh.tail_points),
    ])
    nodes = s.grid.x[1:]

    z, zn = np.log(logs), np.log(nodes)
    k = np.clip(np.searchsorted(zn, z), 1, zn.size - 1)
    nearest = np.minimum(np.abs(zn[k] - z), np.abs(zn[k - 1] - z))
    tol = MERGE_FRACTION * math.log(1.0 / mesh.x_min_factor) / (mesh.points - 1)
    return np.union1d(logs[nearest > tol], nodes)


def _every_other(n: int) -> np.ndarray:
    idx = np.arange(0, n, 2)
    return idx if idx[-1] == n - 1 else np.append(idx, n - 1)


def density_from_field(drift: DriftField, x: np.ndarray, mesh: DensityMesh = DensityMesh()) -> InvariantDensity:
    """Normalised stationary density of dx = h dt + sigma x dW on the mesh x"""
    sigma = drift.sigma
    if not sigma > 0:
        raise NonpositiveParameter("the invariant density needs sigma > 0", parameter="sigma", value=sigma)

    phi = _phi_on_mesh(drift, x)
    exponent = 2 * (1 + drift.b / sigma ** 2)
    log_f = -exponent * np.log(x) - (2 / sigma ** 2) * phi
    shift = float(np.max(log_f))
    g = np.exp(log_f - shift)

    z = np.log(x)
    body = simpson(g * x, x=z)
    tail_mass = g[-1] * x[-1] / (exponent - 1)
    total = body + tail_mass

    half = _every_other(x.size)
    coarse = simpson((g * x)[half], x=z[half]) + tail_mass
    rel_change = abs(coarse - total) / total if total > 0 else math.inf
    if not (math.isfinite(total) and total > 0) or rel_change > mesh.quadrature_rtol:
        raise NormalizationFailure(
            f"normalisation did not converge (relative change {rel_change:.3e} under mesh halving)",
            points=int(x.size), x_min=float(x[0]), x_max=float(x[-1]),
            body=float(body), tail_mass=float(tail_mass), rel_change=float(rel_change),
        )

    f = g / total
    F = cumulative_trapezoid(f * x, z, initial=0.0)
    # pinned so that F(x_max) + tail mass = 1
    F *= (1.0 - tail_mass / total) / F[-1]
    I = sigma * x * f
    modes, antimodes = find_extrema(I, x)

    fit = (x >= mesh.fit_from_factor * drift.l) & (x <= mesh.tail_factor * drift.l)
    tail_slope = float(np.polyfit(np.log(x[fit]), log_f[fit], 1)[0]) if np.count_nonzero(fit) >= 2 else math.nan

    diagnostics = {
        "tail_exponent_fit": tail_slope,
        "tail_exponent_expected": -exponent,
        "tail_mass": float(tail_mass / total),
        "quadrature_rel_change": float(rel_change),
        "F_last": float(F[-1]),
    }
    return InvariantDensity(
        x=x, f=f, F=F, I=I,
        log_Z=shift + math.log(total),
        modes=modes,
        antimodes=antimodes,
        labels=attractor_labels(len(modes)),
        mesh=mesh,
        diagnostics=diagnostics,
    )


def invariant_density(s: ValueSolution, mesh: DensityMesh = DensityMesh()) -> InvariantDensity:
    drift = DriftField.from_solution(s)
    density = density_from_field(drift, density_mesh(s, mesh), mesh)

    # x Phi(x) -> 1/|V'(0)| = exp(rho V_0 + 1) as x -> 0
    expected = math.exp(s.params.rho * s.v[0] + 1.0)
    measured = LEFT_LIMIT_X * phi_profile(drift, LEFT_LIMIT_X, mesh)
    density.diagnostics["left_limit"] = {
        "x": LEFT_LIMIT_X,
        "x_phi": float(measured),
        "expected": expected,
        "rel_error": abs(measured - expected) / expected,
    }

    logger.info(
        f"[DENSITY] sigma={s.params.sigma:g} modes={np.round(density.modes, 4).tolist()} "
        f"antimodes={np.round(density.antimodes, 4).tolist()} log_Z={density.log_Z:.4f}"
    )
    return density


# ═══════════════════════════════════════════════════════════════════════
# EXTREMA
# ═══════════════════════════════════════════════════════════════════════

def _vertex(x: np.ndarray, y: np.ndarray, k: int) -> float:
    if k <= 0 or k >= len(x) - 1:
        return float(x[k])
    xs = x[k - 1:k + 2] - x[k]
    a2, a1, _ = np.polyfit(xs, y[k - 1:k + 2], 2)
    if a2 == 0:
        return float(x[k])
    return float(x[k] + np.clip(-a1 / (2 * a2), xs[0], xs[2]))


def find_extrema(I: np.ndarray, x: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Interior local maxima (modes) and the minimum between each pair of
    consecutive maxima (antimodes), refined by 3-point parabolas.
    """
    I = np.asarray(I, dtype=float)
    x = np.arange(I.size, dtype=float) if x is None else np.asarray(x, dtype=float)
    if I.size < 3 or not np.any(I > 0):
        return np.array([]), np.array([])

    smooth = uniform_filter1d(I, size=3, mode="nearest")
    peaks, _ = find_peaks(smooth, prominence=PROMINENCE * float(np.max(smooth)))

    modes = np.array([_vertex(x, I, int(k)) for k in peaks])
    troughs = [int(lo + np.argmin(smooth[lo:hi + 1])) for lo, hi in zip(peaks[:-1], peaks[1:])]
    antimodes = np.array([_vertex(x, -I, k) for k in troughs])
    return modes, antimodes


def attractor_labels(count: int) -> Tuple[str, ...]:
    if count == 0:
        return ()
    if count == 1:
        return ("attractor",)
    return ("oligotrophic",) + ("intermediate",) * (count - 2) + ("eutrophic",)


# ═══════════════════════════════════════════════════════════════════════
# SWEEPS
# ═══════════════════════════════════════════════════════════════════════

def _sweep_point(task: Tuple) -> SweepPoint:
    base, name, value, l, n, closure, tol, max_iter, mesh = task
    try:
        s = solve_params(base.replace(**{name: value}), l=l, n=n, tol=tol, max_iter=max_iter, closure=closure)
        d = invariant_density(s, mesh)
        return SweepPoint(
            value=value,
            modes=d.modes,
            antimodes=d.antimodes,
            diagnostics={**s.summary(), "l": s.grid.l, "n": s.grid.n, "log_Z": d.log_Z},
        )
    except LakeError as e:
        logger.warning(f"[SWEEP] {name}={value:g} failed: {e.__class__.__name__}: {e.message}")
        return SweepPoint(value=value, modes=np.array([]), antimodes=np.array([]), error=e.to_dict())


def bifurcation_sweep(
    base: LakeParams,
    name: str,
    values: Sequence[float],
    l: Optional[float] = None,
    n: int = DEFAULT_N,
    closure: Closure = Closure.SLOPE,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    mesh: DensityMesh = DensityMesh(),
    jobs: int = 1,
) -> SweepResult:
    """
    Solve, build the density and locate the extrema of I for every value.
    Failed points are recorded and the sweep continues. Results are
    ordered by parameter value.
    """
    if name not in SWEEPABLE:
        raise ValueError(f"sweep parameter must be one of {SWEEPABLE}, got {name!r}")

    ordered = sorted(float(v) for v in values)
    tasks = [(base, name, v, l, n, closure, tol, max_iter, mesh) for v in ordered]
    logger.info(f"[SWEEP] {name} over {len(tasks)} values with jobs={jobs}")

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            points = list(pool.map(_sweep_point, tasks))
    else:
        points = [_sweep_point(t) for t in tasks]

    result = SweepResult(name=name, values=np.array(ordered), points=tuple(points))
    if result.partial:
        logger.warning(f"[SWEEP] {len(result.failed)} of {len(points)} points failed: {result.failed}")
    return result
