from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from models import LakeParams
from sde import SimConfig
from settings import DEFAULT_JOBS
from solver import DEFAULT_MAX_ITER, DEFAULT_N, DEFAULT_TOL, Closure

Command = Literal["solve", "density", "sweep", "simulate", "escape", "verify"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridSection(_Section):
    l: Optional[float] = Field(None, gt=0)
    n: int = Field(DEFAULT_N, ge=8)
    closure: Closure = Closure.SLOPE


class SolverSection(_Section):
    tol: float = Field(DEFAULT_TOL, gt=0)
    max_iter: int = Field(DEFAULT_MAX_ITER, ge=1)


class SimSection(SimConfig):
    model_config = ConfigDict(extra="forbid", frozen=True)

    x0: float = Field(1.0, gt=0)
    burn_in: float = Field(1e3, ge=0)
    bias: float = Field(1e-3, gt=0)

    def sim_config(self) -> SimConfig:
        return SimConfig(**self.model_dump(include=set(SimConfig.model_fields)))


class EscapeSection(_Section):
    samples: int = Field(1000, ge=1)
    max_steps: int = Field(10 ** 7, ge=1)


class SweepSection(_Section):
    name: Literal["sigma", "c", "rho"] = "sigma"
    start: float = 0.05
    stop: float = 0.6
    count: int = Field(12, ge=1)

    def values(self) -> List[float]:
        return np.linspace(self.start, self.stop, self.count).tolist()


class RunConfig(_Section):
    command: Command = "solve"
    params: LakeParams = LakeParams()
    grid: GridSection = GridSection()
    solver: SolverSection = SolverSection()
    sim: SimSection = SimSection()
    escape: EscapeSection = EscapeSection()
    sweep: SweepSection = SweepSection()
    output_dir: Path = Path("results")
    jobs: int = Field(DEFAULT_JOBS, ge=1)


# ═══════════════════════════════════════════════════════════════════════
# SIDECARS
# ═══════════════════════════════════════════════════════════════════════

class SolutionSidecar(BaseModel):
    params: Dict[str, Any]
    rate: str
    grid: Dict[str, Any]
    closure: str
    residual_norm: float
    residual_abs: float
    newton_iters: int
    A: float
    K: float
    v0_upper: float
    boundary_value: float
    asymptotic_residual: float
    policy_jump_at_l: float
    warnings: List[str] = []


class DensitySidecar(BaseModel):
    mesh: Dict[str, Any]
    log_Z: float
    Z: Optional[float]
    modes: List[float]
    antimodes: List[float]
    labels: List[str]
    diagnostics: Dict[str, Any]


class SweepPointSidecar(BaseModel):
    value: float
    modes: List[float]
    antimodes: List[float]
    diagnostics: Dict[str, Any] = {}
    error: Optional[Dict[str, Any]] = None


class SweepSidecar(BaseModel):
    name: str
    values: List[float]
    partial: bool
    failed: List[float]
    points: List[SweepPointSidecar]


class SimulationSidecar(BaseModel):
    sim: Dict[str, Any]
    x0: float
    recorded_states: int
    final_state: float
    min_state: float
    mc: Optional[Dict[str, Any]] = None


class EscapeSidecar(BaseModel):
    sim: Dict[str, Any]
    summary: Dict[str, Any]
    max_steps: int


class CheckResult(BaseModel):
    name: str
    status: Literal["PASSED", "FAILED", "SKIPPED"]
    measured: Optional[Any] = None
    threshold: Optional[Any] = None
    detail: Dict[str, Any] = {}


class VerifyReportModel(BaseModel):
    summary: Dict[str, Any]
    checks: List[CheckResult]


class ManifestFile(BaseModel):
    name: str
    sha256: str
    bytes: int


class Manifest(BaseModel):
    tool: str = "shallowlake"
    version: str
    command: str
    config: Dict[str, Any]
    started_at: str
    finished_at: str
    timings: Dict[str, float]
    exit_code: int
    files: List[ManifestFile]


class ErrorReport(BaseModel):
    error: str
    message: str
    exit_code: int
    detail: Dict[str, Any] = {}
