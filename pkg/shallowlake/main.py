"""
Shallow Lake Runner
===================
One handler per command. `run` dispatches, converts LakeError into the
exit code and error.json, and always closes with manifest.json.

Emitted files:
    solve     solution.csv (x,V,dV,policy)          solution.json
    density   density.csv (x,f,F,I)                 density.json
    sweep     sweep.csv (param,value,kind,location) sweep.json
    simulate  path.csv (t,x)                        simulate.json
    escape    escape.csv (sample,time,normalized,censored) escape.json
    verify    verify.json
"""

import logging
import math
import sys
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from typing import Callable, Dict

import numpy as np

from audit_logger import audit_logger
from errors import ConfigError, LakeError, PartialSweep
from invariant import InvariantDensity, bifurcation_sweep, invariant_density
from models import asymptotic_slope, validate_params
from outputs import OutputWriter, error_report
from schemas import (
    DensitySidecar,
    ErrorReport,
    Manifest,
    RunConfig,
    SimulationSidecar,
    SolutionSidecar,
    SweepPointSidecar,
    SweepSidecar,
    EscapeSidecar,
)
from sde import escape_times, estimate_value_mc, simulate_path
from settings import __version__
from solver import ValueSolution, build_grid, solve
from verify import run_verify

logger = logging.getLogger(__name__)


@contextmanager
def _timed(timings: Dict[str, float], key: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[key] = timings.get(key, 0.0) + time.perf_counter() - start


# ═══════════════════════════════════════════════════════════════════════
# SHARED STEPS
# ═══════════════════════════════════════════════════════════════════════

def solve_config(cfg: RunConfig, timings: Dict[str, float]) -> ValueSolution:
    p = validate_params(cfg.params)
    with _timed(timings, "solve"):
        s = solve(build_grid(p, cfg.grid.l, cfg.grid.n), p, tol=cfg.solver.tol,
                  max_iter=cfg.solver.max_iter, closure=cfg.grid.closure)
    audit_logger.log_solve(s)
    return s


def density_config(s: ValueSolution, timings: Dict[str, float]) -> InvariantDensity:
    with _timed(timings, "density"):
        d = invariant_density(s)
    audit_logger.log_density(d, s.params.sigma)
    return d


def solution_rows(s: ValueSolution) -> Dict[str, np.ndarray]:
    """n + 1 rows; the last node takes the asymptotic slope at l"""
    k = s.constants
    dV = np.append(s.dV, asymptotic_slope(s.grid.l, k.A, k.alpha, s.params.rho))
    return {"x": s.x, "V": s.v, "dV": dV, "policy": -1.0 / dV}


def solution_sidecar(s: ValueSolution) -> SolutionSidecar:
    k = s.constants
    return SolutionSidecar(
        params=s.params.params.model_dump(mode="json"),
        rate=s.params.rate.label(),
        grid=s.grid.spec(),
        closure=s.closure.value,
        residual_norm=s.residual_norm,
        residual_abs=s.residual_abs,
        newton_iters=s.newton_iters,
        A=k.A,
        K=k.K,
        v0_upper=k.v0_upper,
        boundary_value=s.boundary_value,
        asymptotic_residual=s.asymptotic_residual,
        policy_jump_at_l=s.policy_jump_at_l,
        warnings=list(s.params.warnings),
    )


# ═══════════════════════════════════════════════════════════════════════
# HANDLERS
# ═══════════════════════════════════════════════════════════════════════

def handle_solve(cfg: RunConfig, writer: OutputWriter, timings: Dict[str, float]) -> int:
    s = solve_config(cfg, timings)
    writer.write_csv("solution.csv", solution_rows(s), ["x", "V", "dV", "policy"])
    writer.write_json("solution.json", solution_sidecar(s))
    return 0


def handle_density(cfg: RunConfig, writer: OutputWriter, timings: Dict[str, float]) -> int:
    s = solve_config(cfg, timings)
    d = density_config(s, timings)
    writer.write_csv("density.csv", {"x": d.x, "f": d.f, "F": d.F, "I": d.I}, ["x", "f", "F", "I"])
    writer.write_json("density.json", DensitySidecar(
        mesh=d.mesh.model_dump(),
        log_Z=d.log_Z,
        Z=d.Z if math.isfinite(d.Z) else None,
        modes=d.modes.tolist(),
        antimodes=d.antimodes.tolist(),
        labels=list(d.labels),
        diagnostics=d.diagnostics,
    ))
    return 0


def handle_sweep(cfg: RunConfig, writer: OutputWriter, timings: Dict[str, float]) -> int:
    with _timed(timings, "sweep"):
        result = bifurcation_sweep(
            cfg.params, cfg.sweep.name, cfg.sweep.values(),
            l=cfg.grid.l, n=cfg.grid.n, closure=cfg.grid.closure,
            tol=cfg.solver.tol, max_iter=cfg.solver.max_iter, jobs=cfg.jobs,
        )
    audit_logger.log_sweep(result)

    writer.write_csv("sweep.csv", result.rows(), ["param", "value", "kind", "location"])
    writer.write_json("sweep.json", SweepSidecar(
        name=result.name,
        values=result.values.tolist(),
        partial=result.partial,
        failed=result.failed,
        points=[
            SweepPointSidecar(value=pt.value, modes=pt.modes.tolist(), antimodes=pt.antimodes.tolist(),
                              diagnostics=pt.diagnostics, error=pt.error)
            for pt in result.points
        ],
    ))
    if result.partial:
        raise PartialSweep(
            f"{len(result.failed)} of {len(result.points)} sweep points failed",
            failed=result.failed,
            errors=[pt.error for pt in result.points if not pt.ok],
        )
    return 0


def handle_simulate(cfg: RunConfig, writer: OutputWriter, timings: Dict[str, float]) -> int:
    s = solve_config(cfg, timings)
    sim = cfg.sim.sim_config()
    with _timed(timings, "simulate"):
        path = simulate_path(s, sim, cfg.sim.x0)
    writer.write_csv("path.csv", {"t": path.times, "x": path.states}, ["t", "x"])

    mc = None
    if sim.n_paths > 1:
        with _timed(timings, "monte_carlo"):
            estimate = estimate_value_mc(s, sim, cfg.sim.x0, bias_target=cfg.sim.bias, jobs=cfg.jobs)
        audit_logger.log_ensemble("optimal", cfg.sim.x0, estimate, sim.model_dump())
        mc = {**estimate.summary(), "solver_value": s.value_at(cfg.sim.x0)}

    writer.write_json("simulate.json", SimulationSidecar(
        sim=sim.model_dump(),
        x0=cfg.sim.x0,
        recorded_states=int(path.states.size),
        final_state=float(path.states[-1]),
        min_state=float(path.states.min()),
        mc=mc,
    ))
    return 0


def handle_escape(cfg: RunConfig, writer: OutputWriter, timings: Dict[str, float]) -> int:
    s = solve_config(cfg, timings)
    d = density_config(s, timings)
    sim = cfg.sim.sim_config()
    with _timed(timings, "escape"):
        sample = escape_times(s, d, sim, cfg.escape.samples, cfg.escape.max_steps, jobs=cfg.jobs)
    audit_logger.log_escape(sample, sim.model_dump())

    writer.write_csv("escape.csv", sample.rows(), ["sample", "time", "normalized", "censored"])
    writer.write_json("escape.json", EscapeSidecar(sim=sim.model_dump(), summary=sample.summary(),
                                                   max_steps=cfg.escape.max_steps))
    return 0


def handle_verify(cfg: RunConfig, writer: OutputWriter, timings: Dict[str, float]) -> int:
    with _timed(timings, "verify"):
        report = run_verify(cfg)
    summary = report.get_summary()
    audit_logger.log_verify(summary)
    writer.write_json("verify.json", report.to_model())
    if report.ok:
        return 0

    failure = ErrorReport(
        error="VerificationFailed",
        message=f"{summary['failed']} of {summary['total']} checks failed",
        exit_code=3,
        detail={"failed": summary["errors"]},
    )
    writer.write_error(failure)
    print(failure.model_dump_json(), file=sys.stderr)
    return 3


COMMANDS: Dict[str, Callable[[RunConfig, OutputWriter, Dict[str, float]], int]] = {
    "solve": handle_solve,
    "density": handle_density,
    "sweep": handle_sweep,
    "simulate": handle_simulate,
    "escape": handle_escape,
    "verify": handle_verify,
}


# ═══════════════════════════════════════════════════════════════════════
# RUN
# ═══════════════════════════════════════════════════════════════════════

def run(cfg: RunConfig) -> int:
    """Execute one command. Returns the process exit code."""
    started = datetime.now(timezone.utc)
    timings: Dict[str, float] = {}

    try:
        writer = OutputWriter(cfg.output_dir)
    except ConfigError as e:
        print(error_report(e).model_dump_json(), file=sys.stderr)
        return e.exit_code

    logger.info(f"[CLI] {cfg.command} -> {writer.out_dir}")
    try:
        with _timed(timings, "total"):
            exit_code = COMMANDS[cfg.command](cfg, writer, timings)
    except LakeError as e:
        exit_code = e.exit_code
        audit_logger.log_failure(cfg.command, e.__class__.__name__, e.message, e.to_dict()["detail"])
        report = error_report(e)
        writer.write_error(report)
        print(report.model_dump_json(), file=sys.stderr)

    writer.write_manifest(Manifest(
        version=__version__,
        command=cfg.command,
        config=cfg.model_dump(mode="json"),
        started_at=started.isoformat(),
        finished_at=datetime.now(timezone.utc).isoformat(),
        timings=timings,
        exit_code=exit_code,
        files=writer.manifest_files(),
    ))
    logger.info(f"[CLI] {cfg.command} finished with exit code {exit_code} ({len(writer.files)} files)")
    return exit_code
