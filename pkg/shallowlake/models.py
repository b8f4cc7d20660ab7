"""
Shallow Lake Model
==================
Problem parameters, the recycling-rate family and the derived analytic
constants. `validate_params` is the gatekeeper of every downstream
computation: solver, density and simulation only accept ValidatedParams.

GUARANTEES:
1. All models are frozen (safe to share between workers)
2. Acceptance depends only on field values (idempotent, no side effects)
3. Limits a and C are closed forms per kind, never estimated numerically
"""

import logging
import math
from enum import Enum
from typing import List, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, computed_field

from errors import FinitenessViolation, NonpositiveParameter, RecyclingAssumptionViolation

logger = logging.getLogger(__name__)

# Assumption on r near 0 is sampled on {EPS * 2^-k, k = 0..NEAR_ZERO_LEVELS}
NEAR_ZERO_EPS = 0.1
NEAR_ZERO_LEVELS = 20


class RecyclingKind(str, Enum):
    STANDARD = "standard"
    TANH_SHIFTED = "tanh_shifted"
    STEP = "step"


class RecyclingRate(BaseModel):
    """
    Tagged sigmoid recycling rate r(x).

    standard      r(x) = x^2 / (x^2 + 1)
    tanh_shifted  r(x) = scale * (tanh(slope * (x - center)) + tanh(slope * center))
    step          r(x) = 1{x > threshold}

    Fields that do not belong to `kind` are ignored.
    """

    model_config = ConfigDict(frozen=True)

    kind: RecyclingKind = RecyclingKind.STANDARD
    center: float = 3.0
    slope: float = 1.0
    scale: float = 1.0
    threshold: float = 3.0

    @classmethod
    def standard(cls) -> "RecyclingRate":
        return cls(kind=RecyclingKind.STANDARD)

    @classmethod
    def tanh_shifted(cls, center: float, slope: float, scale: float) -> "RecyclingRate":
        return cls(kind=RecyclingKind.TANH_SHIFTED, center=center, slope=slope, scale=scale)

    @classmethod
    def step(cls, threshold: float) -> "RecyclingRate":
        return cls(kind=RecyclingKind.STEP, threshold=threshold)

    @classmethod
    def tanh3(cls) -> "RecyclingRate":
        """tanh(x - 3) + tanh(3)"""
        return cls.tanh_shifted(3.0, 1.0, 1.0)

    @classmethod
    def half_tanh(cls, steepness: float) -> "RecyclingRate":
        """(tanh(a(x - 3)) + tanh(3a)) / 2, tends to 1{x > 3} as a grows"""
        return cls.tanh_shifted(3.0, steepness, 0.5)

    @computed_field
    @property
    def a(self) -> float:
        return recycling_limits(self)[0]

    @computed_field
    @property
    def C(self) -> float:
        return recycling_limits(self)[1]

    def __call__(self, x):
        return recycling_eval(self, x)

    def label(self) -> str:
        if self.kind == RecyclingKind.TANH_SHIFTED:
            return f"tanh_shifted(center={self.center:g}, slope={self.slope:g}, scale={self.scale:g})"
        if self.kind == RecyclingKind.STEP:
            return f"step(threshold={self.threshold:g})"
        return "standard"


class LakeParams(BaseModel):
    """Economic/ecological parameters of the lake. Raw, not yet admissible."""

    model_config = ConfigDict(frozen=True)

    b: float = 0.65
    c: float = 0.5
    rho: float = 0.03
    sigma: float = 0.1
    rate: RecyclingRate = RecyclingRate()

    def replace(self, **changes) -> "LakeParams":
        return self.model_copy(update=changes)


class ValidatedParams(BaseModel):
    """LakeParams that passed every admissibility check."""

    model_config = ConfigDict(frozen=True)

    params: LakeParams
    a: float
    C: float
    warnings: Tuple[str, ...] = ()

    @property
    def b(self) -> float:
        return self.params.b

    @property
    def c(self) -> float:
        return self.params.c

    @property
    def rho(self) -> float:
        return self.params.rho

    @property
    def sigma(self) -> float:
        return self.params.sigma

    @property
    def rate(self) -> RecyclingRate:
        return self.params.rate

    @property
    def alpha(self) -> float:
        """a / (b + rho): shift of the quadratic asymptote"""
        return self.a / (self.b + self.rho)

    def r(self, x):
        return recycling_eval(self.params.rate, x)


class DerivedConstants(BaseModel):
    model_config = ConfigDict(frozen=True)

    A: float
    K: float
    v0_upper: float
    alpha: float


# ═══════════════════════════════════════════════════════════════════════
# RECYCLING RATE
# ═══════════════════════════════════════════════════════════════════════

def recycling_eval(rate: RecyclingRate, x):
    """r(x) for scalar or array x >= 0. Returns the same shape as x."""
    xs = np.asarray(x, dtype=float)
    if np.any(xs < 0):
        raise ValueError("recycling rate is defined on x >= 0")

    if rate.kind == RecyclingKind.STANDARD:
        out = xs * xs / (xs * xs + 1.0)
    elif rate.kind == RecyclingKind.TANH_SHIFTED:
        out = rate.scale * (np.tanh(rate.slope * (xs - rate.center)) + np.tanh(rate.slope * rate.center))
        # tanh(-s c) + tanh(s c) is 0 exactly at x = 0 only up to rounding
        out = np.where(xs == 0.0, 0.0, out)
    else:
        out = np.where(xs > rate.threshold, 1.0, 0.0)

    if np.ndim(x) == 0:
        return float(out)
    return out


def recycling_limits(rate: RecyclingRate) -> Tuple[float, float]:
    """(a, C) with a = lim r(x) and C = lim x (a - r(x))"""
    if rate.kind == RecyclingKind.TANH_SHIFTED:
        return rate.scale * (1.0 + math.tanh(rate.slope * rate.center)), 0.0
    # standard: x / (1 + x^2) -> 0; step: exact for x > threshold
    return 1.0, 0.0


def _monotonicity_mesh(rate: RecyclingRate) -> np.ndarray:
    span = max(20.0, 4.0 * abs(rate.center), 4.0 * abs(rate.threshold))
    mesh = np.concatenate([
        np.geomspace(1e-8, 1.0, 400),
        np.linspace(0.0, span, 8001),
        np.geomspace(span, 1e6, 400),
    ])
    return np.unique(mesh)


# ═══════════════════════════════════════════════════════════════════════
# ADMISSIBILITY
# ═══════════════════════════════════════════════════════════════════════

def validate_params(p: Union[LakeParams, ValidatedParams]) -> ValidatedParams:
    """
    Check every admissibility condition and wrap the parameters.

    Raises:
        NonpositiveParameter: b, c, rho not finite and > 0, or sigma not finite and >= 0
        FinitenessViolation: sigma^2 >= rho + 2b
        RecyclingAssumptionViolation: which sub-check failed is in detail["sub_check"]
    """
    if isinstance(p, ValidatedParams):
        p = p.params

    for name in ("b", "c", "rho"):
        value = getattr(p, name)
        if not math.isfinite(value) or value <= 0:
            raise NonpositiveParameter(f"{name} must be finite and > 0, got {value}", parameter=name, value=value)
    if not math.isfinite(p.sigma) or p.sigma < 0:
        raise NonpositiveParameter(f"sigma must be finite and >= 0, got {p.sigma}", parameter="sigma", value=p.sigma)

    if p.sigma ** 2 >= p.rho + 2 * p.b:
        raise FinitenessViolation(
            f"sigma^2 = {p.sigma ** 2:g} >= rho + 2b = {p.rho + 2 * p.b:g}: value function is not finite",
            sigma_squared=p.sigma ** 2,
            bound=p.rho + 2 * p.b,
        )

    rate = p.rate
    warnings: List[str] = []

    if rate.kind == RecyclingKind.TANH_SHIFTED:
        for name in ("center", "slope", "scale"):
            if not math.isfinite(getattr(rate, name)):
                raise RecyclingAssumptionViolation(
                    f"rate.{name} must be finite", sub_check="finite_fields", field=name)
        if rate.slope <= 0 or rate.scale <= 0:
            raise RecyclingAssumptionViolation(
                "tanh_shifted rate needs slope > 0 and scale > 0",
                sub_check="nondecreasing", slope=rate.slope, scale=rate.scale,
            )
    if rate.kind == RecyclingKind.STEP and not math.isfinite(rate.threshold):
        raise RecyclingAssumptionViolation("rate.threshold must be finite", sub_check="finite_fields", field="threshold")

    if recycling_eval(rate, 0.0) != 0.0:
        raise RecyclingAssumptionViolation("r(0) must be 0", sub_check="r_at_zero", value=recycling_eval(rate, 0.0))

    near_zero = NEAR_ZERO_EPS * 2.0 ** -np.arange(NEAR_ZERO_LEVELS + 1)
    bad = recycling_eval(rate, near_zero) >= (p.b + p.rho) * near_zero
    if np.any(bad):
        x_bad = float(near_zero[np.argmax(bad)])
        raise RecyclingAssumptionViolation(
            f"r(x) < (b + rho) x fails near 0 at x = {x_bad:g}",
            sub_check="below_linear_near_zero", x=x_bad,
        )

    mesh = _monotonicity_mesh(rate)
    values = recycling_eval(rate, mesh)
    drops = np.diff(values)
    if np.any(drops < -1e-12):
        k = int(np.argmin(drops))
        raise RecyclingAssumptionViolation(
            f"r is not nondecreasing between x = {mesh[k]:g} and {mesh[k + 1]:g}",
            sub_check="nondecreasing", x=float(mesh[k]),
        )

    a, C = recycling_limits(rate)
    if not (math.isfinite(a) and math.isfinite(C)) or C < 0:
        raise RecyclingAssumptionViolation("limits a, C must be finite with C >= 0", sub_check="limits", a=a, C=C)

    if rate.kind == RecyclingKind.STEP:
        msg = "step recycling is not locally Lipschitz; admitted as the limit of steep tanh rates"
        logger.warning(f"[MODEL] {msg}")
        warnings.append(msg)

    return ValidatedParams(params=p, a=a, C=C, warnings=tuple(warnings))


# ═══════════════════════════════════════════════════════════════════════
# ANALYTIC CONSTANTS
# ═══════════════════════════════════════════════════════════════════════

def derived_constants(p: ValidatedParams) -> DerivedConstants:
    b, c, rho, sigma = p.b, p.c, p.rho, p.sigma
    A = c / (rho + 2 * b - sigma ** 2)
    K = (1.0 / rho) * (
        (2 * b + sigma ** 2) / (2 * rho)
        - A * p.a ** 2 * (rho + 2 * b) / (b + rho) ** 2
        - 1.0
        + 2 * A * p.C
    )
    v0_upper = (1.0 / rho) * math.log((b + rho) / math.sqrt(2 * math.e * c))
    return DerivedConstants(A=A, K=K, v0_upper=v0_upper, alpha=p.alpha)


def asymptotic_value(x, A: float, alpha: float, rho: float, K: float):
    """Large-x asymptote -A (x + alpha)^2 - ln(2A (x + alpha)) / rho + K"""
    X = np.asarray(x, dtype=float) + alpha
    out = -A * X * X - np.log(2 * A * X) / rho + K
    return float(out) if np.ndim(x) == 0 else out


def asymptotic_slope(x, A: float, alpha: float, rho: float):
    """Derivative of `asymptotic_value`: -2A (x + alpha) - 1 / (rho (x + alpha))"""
    X = np.asarray(x, dtype=float) + alpha
    out = -2 * A * X - 1.0 / (rho * X)
    return float(out) if np.ndim(x) == 0 else out


def default_right_endpoint(p: ValidatedParams) -> float:
    return 4.0 * max(1.0, p.alpha) + 2.0
