"""
Shallow Lake Path Simulation
============================
Euler-Maruyama for the controlled lake in log coordinates y = ln x:

    dy = (u(x)/x + r(x)/x - b - sigma^2/2) dt + sigma dW,   x = e^y

The drift is tabulated on a uniform y grid over [ln(1e-6 l), ln(100 l)]
and the recursions run in numba kernels, one path at a time, fed with
pre-drawn normals in chunks.

GUARANTEES:
1. x_t > 0 on every path (log-space construction)
2. (seed, cfg, params) fix every output array bitwise, whatever `jobs` is
3. Path i always draws from Philox(SeedSequence(seed, spawn_key=(i,)))
4. With substeps = k each step consumes k normals, so (dt, k=2) and
   (dt/2, k=1) see the same Brownian path
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np
from numba import njit
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats
from scipy.integrate import solve_ivp

from errors import DriftEvaluationOutOfRange, NoEscapes, NoSecondAttractor
from invariant import InvariantDensity
from models import ValidatedParams
from solver import ValueSolution, policy_from_solution

logger = logging.getLogger(__name__)

TABLE_POINTS = 200_001
TABLE_LOW_FACTOR = 1e-6
TABLE_HIGH_FACTOR = 100.0
CHUNK = 1 << 16
DEFAULT_BIAS = 1e-3
ESCAPE_HORIZON_STEPS = 10 ** 7


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    dt: float = Field(1e-3, gt=0)
    horizon: float = Field(100.0, gt=0)
    seed: int = Field(20240917, ge=0, lt=2 ** 64)
    n_paths: int = Field(1, ge=1)
    substeps: int = Field(1, ge=1)
    record_every: int = Field(1, ge=1)
    scheme: str = Field("euler_maruyama_log", pattern="^euler_maruyama_log$")

    @model_validator(mode="after")
    def _horizon_covers_a_step(self) -> "SimConfig":
        if self.horizon < self.dt:
            raise ValueError(f"horizon {self.horizon} is shorter than dt {self.dt}")
        return self

    @property
    def steps(self) -> int:
        return int(math.ceil(self.horizon / self.dt - 1e-9))


@dataclass(frozen=True)
class PathSample:
    times: np.ndarray
    states: np.ndarray
    seed: int
    path_index: int
    params: Dict


@dataclass(frozen=True)
class McEstimate:
    estimate: float
    stderr: float
    bias: float
    T_cutoff: float
    n_paths: int
    payoffs: np.ndarray

    def summary(self) -> Dict:
        return {
            "estimate": self.estimate,
            "stderr": self.stderr,
            "bias": self.bias,
            "T_cutoff": self.T_cutoff,
            "n_paths": self.n_paths,
        }


@dataclass(frozen=True)
class EscapeSample:
    times: np.ndarray
    censored: np.ndarray
    raw_times: np.ndarray
    mean: float
    normalized: np.ndarray
    ks_statistic: float
    ks_pvalue: float
    x_minus: float
    x_plus: float

    @property
    def n_censored(self) -> int:
        return int(np.count_nonzero(self.censored))

    def rows(self) -> List[Dict]:
        rows, k = [], 0
        for i, (t, cens) in enumerate(zip(self.times, self.censored)):
            if cens:
                rows.append({"sample": i, "time": float(t), "normalized": math.nan, "censored": True})
            else:
                rows.append({"sample": i, "time": float(t), "normalized": float(self.normalized[k]), "censored": False})
                k += 1
        return rows

    @property
    def stderr(self) -> float:
        n = self.raw_times.size
        return float(self.raw_times.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    def summary(self) -> Dict:
        return {
            "x_minus": self.x_minus,
            "x_plus": self.x_plus,
            "samples": int(self.times.size),
            "censored": self.n_censored,
            "mean": self.mean,
            "stderr": self.stderr,
            "ks_statistic": self.ks_statistic,
            "ks_pvalue": self.ks_pvalue,
        }


@dataclass(frozen=True)
class OccupationCheck:
    statistic: float
    pvalue: float
    n_samples: int
    burn_in: float
    horizon: float


# ═══════════════════════════════════════════════════════════════════════
# POLICIES
# ═══════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class FeedbackPolicy:
    """u = max(1, x)/(1 + x^2) + a - r(x)"""

    params: ValidatedParams

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.maximum(1.0, x) / (1.0 + x * x) + self.params.a - self.params.r(x)


@dataclass(frozen=True)
class TruncatedPolicy:
    base: Callable
    cap: float

    def __call__(self, x):
        return np.minimum(self.base(x), self.cap)


@dataclass(frozen=True)
class ConstantPolicy:
    value: float

    def __call__(self, x):
        return np.full(np.shape(x), self.value, dtype=float)


def optimal_policy(s: ValueSolution) -> Callable:
    return policy_from_solution(s)[1]


# ═══════════════════════════════════════════════════════════════════════
# DRIFT TABLE
# ═══════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class DriftTable:
    """g(y) and ln u(e^y) on a uniform y grid; y_max bounds the valid range"""

    y_lo: float
    dy: float
    g: np.ndarray
    log_u: np.ndarray
    sigma: float
    c: float
    rho: float
    y_max: float

    @classmethod
    def from_policy(cls, policy: Callable, p: ValidatedParams, l: float, points: int = TABLE_POINTS) -> "DriftTable":
        y = np.linspace(math.log(TABLE_LOW_FACTOR * l), math.log(TABLE_HIGH_FACTOR * l), points)
        x = np.exp(y)
        u = np.asarray(policy(x), dtype=float)
        if np.any(~(u > 0)):
            raise ValueError("policy must be positive on the simulation range")
        g = (u + p.r(x)) / x - p.b - p.sigma ** 2 / 2
        return cls(
            y_lo=float(y[0]), dy=float(y[1] - y[0]), g=g, log_u=np.log(u),
            sigma=p.sigma, c=p.c, rho=p.rho, y_max=float(y[-1]),
        )

    @classmethod
    def from_solution(cls, s: ValueSolution, policy: Optional[Callable] = None) -> "DriftTable":
        return cls.from_policy(policy or optimal_policy(s), s.params, s.grid.l)

    @classmethod
    def from_log_drift(
        cls, drift: Callable, y_lo: float, y_hi: float, sigma: float,
        points: int = TABLE_POINTS, rho: float = 1.0,
    ) -> "DriftTable":
        """Table for an arbitrary drift g(y) in log coordinates (payoff terms zero)"""
        y = np.linspace(y_lo, y_hi, points)
        return cls(
            y_lo=float(y_lo), dy=float(y[1] - y[0]), g=np.asarray(drift(y), dtype=float),
            log_u=np.zeros(points), sigma=sigma, c=0.0, rho=rho, y_max=float(y_hi),
        )


# ═══════════════════════════════════════════════════════════════════════
# KERNELS
# ═══════════════════════════════════════════════════════════════════════

@njit(cache=True, nogil=True)
def _lookup(tab, y_lo, dy, y):
    pos = (y - y_lo) / dy
    last = tab.shape[0] - 1
    if pos <= 0.0:
        return tab[0]
    if pos >= last:
        return tab[last]
    k = int(pos)
    w = pos - k
    return tab[k] * (1.0 - w) + tab[k + 1] * w


@njit(cache=True, nogil=True)
def _em_chunk(y, noise, y_lo, dy, g, sigma, dt, y_max, out):
    """Advance len(noise) steps writing y after each; returns (y, index of escape past y_max or -1)"""
    scale = sigma * math.sqrt(dt)
    for k in range(noise.shape[0]):
        y = y + _lookup(g, y_lo, dy, y) * dt + scale * noise[k]
        out[k] = y
        if y > y_max:
            return y, k
    return y, -1


@njit(cache=True, nogil=True)
def _payoff_chunk(y, disc, acc, noise, y_lo, dy, g, log_u, c, decay, sigma, dt, y_max):
    """Left-endpoint accumulation of e^{-rho t}(ln u - c x^2) dt along the path"""
    scale = sigma * math.sqrt(dt)
    for k in range(noise.shape[0]):
        x = math.exp(y)
        acc += disc * (_lookup(log_u, y_lo, dy, y) - c * x * x) * dt
        disc *= decay
        y = y + _lookup(g, y_lo, dy, y) * dt + scale * noise[k]
        if y > y_max:
            return y, disc, acc, k
    return y, disc, acc, -1


@njit(cache=True, nogil=True)
def _passage_chunk(y, target, noise, y_lo, dy, g, sigma, dt, y_max):
    """Returns (y, steps taken up to the first y >= target or -1, out-of-range flag)"""
    scale = sigma * math.sqrt(dt)
    for k in range(noise.shape[0]):
        y = y + _lookup(g, y_lo, dy, y) * dt + scale * noise[k]
        if y > y_max:
            return y, k + 1, True
        if y >= target:
            return y, k + 1, False
    return y, -1, False


# ═══════════════════════════════════════════════════════════════════════
# STREAMS
# ═══════════════════════════════════════════════════════════════════════

def path_rng(seed: int, path_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(path_index,))))


def _normals(rng: np.random.Generator, count: int, substeps: int) -> np.ndarray:
    if substeps == 1:
        return rng.standard_normal(count)
    return rng.standard_normal((count, substeps)).sum(axis=1) / math.sqrt(substeps)


def _map_paths(fn: Callable[[int], object], n: int, jobs: int) -> list:
    if jobs > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, range(n)))
    return [fn(i) for i in range(n)]


def _out_of_range(table: DriftTable, step: int, y: float) -> DriftEvaluationOutOfRange:
    return DriftEvaluationOutOfRange(
        f"state x = {math.exp(min(y, 700.0)):.4g} left the drift table (x_max = {math.exp(table.y_max):.4g})",
        step=step, x_max=math.exp(table.y_max),
    )


# ═══════════════════════════════════════════════════════════════════════
# PATHS
# ═══════════════════════════════════════════════════════════════════════

def simulate_table(table: DriftTable, cfg: SimConfig, x0: float, path_index: int = 0, params: Optional[Dict] = None) -> PathSample:
    if not x0 > 0:
        raise ValueError(f"x0 must be > 0, got {x0}")
    rng = path_rng(cfg.seed, path_index)
    every = cfg.record_every
    y = math.log(x0)
    kept = [np.array([y])]
    done = 0

    while done < cfg.steps:
        m = min(CHUNK, cfg.steps - done)
        out = np.empty(m)
        y, bad = _em_chunk(y, _normals(rng, m, cfg.substeps), table.y_lo, table.dy, table.g,
                           table.sigma, cfg.dt, table.y_max, out)
        if bad >= 0:
            raise _out_of_range(table, done + bad + 1, y)
        first = (every - (done + 1) % every) % every
        kept.append(out[first::every])
        done += m

    states = np.exp(np.concatenate(kept))
    times = np.arange(states.size) * cfg.dt * every
    return PathSample(times=times, states=states, seed=cfg.seed, path_index=path_index, params=params or {})


def simulate_path(s: ValueSolution, cfg: SimConfig, x0: float, path_index: int = 0) -> PathSample:
    """One optimally controlled path sampled at multiples of dt * record_every"""
    sample = simulate_table(DriftTable.from_solution(s), cfg, x0, path_index, s.params.params.model_dump())
    logger.info(f"[SDE] path {path_index}: {cfg.steps} steps, x(T)={sample.states[-1]:.4f}")
    return sample


def payoff_scale(s: ValueSolution, policy: Callable) -> float:
    """sup over [0, l] of |ln u - c x^2| / rho"""
    x = s.grid.x
    u = np.asarray(policy(x), dtype=float)
    return float(np.max(np.abs(np.log(u) - s.params.c * x * x)) / s.params.rho)


def cutoff_time(scale: float, rho: float, bias: float = DEFAULT_BIAS) -> float:
    return max(math.log(scale / bias), 0.0) / rho


def _path_payoff(table: DriftTable, cfg: SimConfig, x0: float, steps: int, index: int) -> float:
    rng = path_rng(cfg.seed, index)
    y, disc, acc = math.log(x0), 1.0, 0.0
    decay = math.exp(-table.rho * cfg.dt)
    done = 0
    while done < steps:
        m = min(CHUNK, steps - done)
        y, disc, acc, bad = _payoff_chunk(y, disc, acc, _normals(rng, m, cfg.substeps), table.y_lo, table.dy,
                                          table.g, table.log_u, table.c, decay, table.sigma, cfg.dt, table.y_max)
        if bad >= 0:
            raise _out_of_range(table, done + bad + 1, y)
        done += m
    return acc


def estimate_value_mc(
    s: ValueSolution,
    cfg: SimConfig,
    x0: float,
    T_cutoff: Optional[float] = None,
    policy: Optional[Callable] = None,
    bias_target: float = DEFAULT_BIAS,
    jobs: int = 1,
) -> McEstimate:
    """
    Mean over cfg.n_paths of int_0^T e^{-rho t}(ln u(x_t) - c x_t^2) dt
    under `policy` (default: the optimal feedback), with standard error
    and the truncation bias bound S e^{-rho T}.
    """
    policy = policy or optimal_policy(s)
    table = DriftTable.from_solution(s, policy)
    scale = payoff_scale(s, policy)
    rho = s.params.rho
    T = cutoff_time(scale, rho, bias_target) if T_cutoff is None else float(T_cutoff)
    steps = max(1, int(math.ceil(T / cfg.dt - 1e-9)))

    payoffs = np.array(_map_paths(lambda i: _path_payoff(table, cfg, x0, steps, i), cfg.n_paths, jobs))
    stderr = float(payoffs.std(ddof=1) / math.sqrt(payoffs.size)) if payoffs.size > 1 else 0.0
    result = McEstimate(
        estimate=float(payoffs.mean()),
        stderr=stderr,
        bias=scale * math.exp(-rho * T),
        T_cutoff=T,
        n_paths=int(payoffs.size),
        payoffs=payoffs,
    )
    logger.info(f"[SDE] payoff at x0={x0:g}: {result.estimate:.5f} +/- {result.stderr:.5f} (T={T:.1f}, paths={payoffs.size})")
    return result


def truncation_bound(p: ValidatedParams, N: float) -> float:
    """Upper bound on V - V_N for controls capped at N"""
    return (p.rho + p.b) ** 2 / (4 * p.rho * p.c * N ** 2)


def truncated_policy_value(s: ValueSolution, N: float, cfg: SimConfig, x0: float, **kwargs) -> McEstimate:
    if not N > 0:
        raise ValueError(f"N must be > 0, got {N}")
    return estimate_value_mc(s, cfg, x0, policy=TruncatedPolicy(optimal_policy(s), N), **kwargs)


def deterministic_payoff(s: ValueSolution, x0: float, T: float, policy: Optional[Callable] = None) -> float:
    """int_0^T e^{-rho t}(ln u - c x^2) dt along the noiseless controlled ODE"""
    policy = policy or optimal_policy(s)
    p = s.params

    def rhs(t, state):
        x = math.exp(state[0])
        u = float(policy(x))
        return [(u + p.r(x)) / x - p.b, math.exp(-p.rho * t) * (math.log(u) - p.c * x * x)]

    sol = solve_ivp(rhs, (0.0, T), [math.log(x0), 0.0], method="RK45", rtol=1e-9, atol=1e-11)
    return float(sol.y[1, -1])


# ═══════════════════════════════════════════════════════════════════════
# ESCAPE TIMES
# ═══════════════════════════════════════════════════════════════════════

def _passage_steps(table: DriftTable, cfg: SimConfig, y0: float, target: float, max_steps: int, index: int) -> int:
    rng = path_rng(cfg.seed, index)
    y, done = y0, 0
    while done < max_steps:
        m = min(CHUNK, max_steps - done)
        y, hit, escaped = _passage_chunk(y, target, _normals(rng, m, cfg.substeps), table.y_lo, table.dy,
                                         table.g, table.sigma, cfg.dt, table.y_max)
        if escaped:
            raise _out_of_range(table, done + hit, y)
        if hit >= 0:
            return done + hit
        done += m
    return -1


def first_passage_times(
    table: DriftTable,
    x_minus: float,
    x_plus: float,
    cfg: SimConfig,
    n_samples: int,
    max_steps: int = ESCAPE_HORIZON_STEPS,
    jobs: int = 1,
) -> EscapeSample:
    """First grid times with x >= x_plus starting from x_minus; censored at max_steps * dt"""
    if not 0 < x_minus < x_plus:
        raise ValueError(f"need 0 < x_minus < x_plus, got {x_minus}, {x_plus}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")

    y0, target = math.log(x_minus), math.log(x_plus)
    steps = np.array(_map_paths(lambda i: _passage_steps(table, cfg, y0, target, max_steps, i), n_samples, jobs))
    censored = steps < 0
    times = np.where(censored, max_steps, steps) * cfg.dt
    raw = times[~censored]

    if raw.size == 0:
        raise NoEscapes(f"all {n_samples} samples censored at t = {max_steps * cfg.dt:g}",
                        samples=n_samples, horizon=max_steps * cfg.dt)
    if censored.any():
        logger.warning(f"[ESCAPE] {int(censored.sum())} of {n_samples} samples censored at t = {max_steps * cfg.dt:g}")

    mean = float(raw.mean())
    normalized = raw / mean
    ks = stats.kstest(normalized, "expon")
    logger.info(f"[ESCAPE] {raw.size} escapes, mean time {mean:.4g}, KS={ks.statistic:.4f}")
    return EscapeSample(
        times=times,
        censored=censored,
        raw_times=raw,
        mean=mean,
        normalized=normalized,
        ks_statistic=float(ks.statistic),
        ks_pvalue=float(ks.pvalue),
        x_minus=float(x_minus),
        x_plus=float(x_plus),
    )


def escape_times(
    s: ValueSolution,
    d: InvariantDensity,
    cfg: SimConfig,
    n_samples: int,
    max_steps: int = ESCAPE_HORIZON_STEPS,
    jobs: int = 1,
) -> EscapeSample:
    """Transition times from the oligotrophic to the eutrophic attractor"""
    if len(d.modes) < 2:
        raise NoSecondAttractor(
            f"escape times need two attractors, density has {len(d.modes)}",
            modes=d.modes,
        )
    return first_passage_times(DriftTable.from_solution(s), float(d.modes[0]), float(d.modes[-1]),
                               cfg, n_samples, max_steps, jobs)


# ═══════════════════════════════════════════════════════════════════════
# OCCUPATION
# ═══════════════════════════════════════════════════════════════════════

def occupation_check(
    s: ValueSolution,
    d: InvariantDensity,
    cfg: SimConfig,
    x0: float,
    burn_in: float = 1e3,
    stride: int = 100,
) -> OccupationCheck:
    """KS distance between the states of one long path (after burn-in) and the invariant CDF"""
    long_cfg = cfg.model_copy(update={"horizon": burn_in + cfg.horizon, "record_every": stride})
    path = simulate_table(DriftTable.from_solution(s), long_cfg, x0)
    sample = path.states[path.times >= burn_in]
    ks = stats.kstest(sample, d.cdf)
    logger.info(f"[SDE] occupation KS={ks.statistic:.4f} over {sample.size} states")
    return OccupationCheck(
        statistic=float(ks.statistic), pvalue=float(ks.pvalue),
        n_samples=int(sample.size), burn_in=burn_in, horizon=cfg.horizon,
    )
