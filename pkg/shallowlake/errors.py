"""
Shallow Lake Errors
===================
Exception hierarchy shared by every module.

Library code raises; only the CLI maps an exception to an exit code
and writes the machine-readable error JSON (`LakeError.to_dict`).

Exit codes:
    2  configuration / parameter admissibility
    3  numerical failure
    4  partial sweep
"""

import math
from typing import Any, Dict


def _jsonable(value: Any) -> Any:
    """Coerce numpy scalars, arrays and containers into JSON-safe values"""
    if hasattr(value, "tolist"):
        value = value.tolist()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


class LakeError(Exception):
    """Base class. `detail` carries the structured context of the failure."""

    exit_code = 3

    def __init__(self, message: str, **detail: Any):
        super().__init__(message)
        self.message = message
        self.detail: Dict[str, Any] = detail

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": self.__class__.__name__,
            "message": self.message,
            "exit_code": self.exit_code,
            "detail": _jsonable(self.detail),
        }


# ═══════════════════════════════════════════════════════════════════════
# CONFIGURATION / ADMISSIBILITY (exit 2)
# ═══════════════════════════════════════════════════════════════════════

class ConfigError(LakeError):
    """Unknown key, unparsable line or invalid value. Carries key and line."""

    exit_code = 2


class ParameterError(LakeError):
    exit_code = 2


class FinitenessViolation(ParameterError):
    """sigma^2 >= rho + 2b: the value function is -inf."""


class NonpositiveParameter(ParameterError):
    pass


class RecyclingAssumptionViolation(ParameterError):
    """The recycling rate fails one of the structural checks (`sub_check` names it)."""


# ═══════════════════════════════════════════════════════════════════════
# NUMERICAL (exit 3)
# ═══════════════════════════════════════════════════════════════════════

class NumericalError(LakeError):
    exit_code = 3


class MonotonicityViolation(NumericalError):
    """The grid breaks dx * (r(x) - b x) <= sigma^2 / 2."""


class GridSpecError(NumericalError):
    """Degenerate grid request (l <= 0, n < 8)."""


class NonnegativeForwardDifference(NumericalError):
    """An iterate left the domain of the logarithm (`index` names the stencil)."""


class DegenerateQuadratic(NumericalError):
    pass


class MaxIterationsExceeded(NumericalError):
    """Newton did not converge. `best_v` and `norm` hold the best iterate."""

    def __init__(self, message: str, best_v=None, norm: float = math.inf, **detail: Any):
        super().__init__(message, norm=norm, **detail)
        self.best_v = best_v
        self.norm = norm


class InfeasibleIterate(NumericalError):
    pass


class SingularJacobian(NumericalError):
    pass


class NormalizationFailure(NumericalError):
    pass


class DriftEvaluationOutOfRange(NumericalError):
    pass


class NoSecondAttractor(NumericalError):
    pass


class NoEscapes(NumericalError):
    """Every escape sample was censored at the horizon."""


# ═══════════════════════════════════════════════════════════════════════
# SWEEPS (exit 4)
# ═══════════════════════════════════════════════════════════════════════

class PartialSweep(LakeError):
    """Some sweep points failed; the partial result is still emitted."""

    exit_code = 4
