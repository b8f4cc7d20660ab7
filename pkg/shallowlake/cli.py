"""
Shallow Lake CLI
================
argparse front end. Resolves the run configuration with precedence
CLI flags > config file > defaults and hands it to `main.run`.

USAGE:
    python run.py solve --b 0.65 --c 1 --sigma 0.1
    python run.py sweep --config base.env --sweep sigma:0.05:0.6:12 --jobs 8
    python run.py escape --sigma 0.08 --samples 1000 --out results/escape

Exit codes: 0 success, 2 config/parameter error, 3 numerical failure, 4 partial sweep.
"""

import argparse
import logging
import sys
from typing import Dict, List, Optional

from pydantic import ValidationError

from errors import ConfigError
from main import run
from outputs import error_report
from schemas import RunConfig
from settings import LOCATIONS, LOG_LEVEL, ConfigEntry, __version__, nest, read_config_file

logger = logging.getLogger(__name__)

COMMANDS = ("solve", "density", "sweep", "simulate", "escape", "verify")

# flag -> flat config key
FLAGS: Dict[str, str] = {
    "--b": "b",
    "--c": "c",
    "--rho": "rho",
    "--sigma": "sigma",
    "--rate": "rate.kind",
    "--rate-center": "rate.center",
    "--rate-slope": "rate.slope",
    "--rate-scale": "rate.scale",
    "--rate-threshold": "rate.threshold",
    "--l": "grid.l",
    "--n": "grid.n",
    "--closure": "grid.closure",
    "--tol": "solver.tol",
    "--max-iter": "solver.max_iter",
    "--dt": "sim.dt",
    "--horizon": "sim.horizon",
    "--paths": "sim.paths",
    "--seed": "sim.seed",
    "--x0": "sim.x0",
    "--substeps": "sim.substeps",
    "--record-every": "sim.record_every",
    "--burn-in": "sim.burn_in",
    "--bias": "sim.bias",
    "--samples": "escape.samples",
    "--max-steps": "escape.max_steps",
    "--name": "sweep.name",
    "--out": "output.dir",
    "--jobs": "jobs",
}

SWEEP_PARTS = ("sweep.name", "sweep.start", "sweep.stop", "sweep.count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shallowlake",
        description="Stochastic shallow lake: HJB solver, invariant density, sweeps and path simulation",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", metavar="FILE", help="flat KEY=VALUE config file")
    for flag, key in FLAGS.items():
        parser.add_argument(flag, dest=key, metavar=key.split(".")[-1].upper(), default=None)
    parser.add_argument("--sweep", metavar="NAME:START:STOP:COUNT", default=None)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return parser


def _flag_of(key: str) -> str:
    return next((flag for flag, k in FLAGS.items() if k == key), "--sweep")


def cli_entries(args: argparse.Namespace) -> Dict[str, ConfigEntry]:
    entries: Dict[str, ConfigEntry] = {}
    if args.sweep is not None:
        parts = args.sweep.split(":")
        if len(parts) != 4 or not all(parts):
            raise ConfigError(f"--sweep expects name:start:stop:count, got {args.sweep!r}", key="sweep", source="--sweep")
        for key, value in zip(SWEEP_PARTS, parts):
            entries[key] = ConfigEntry(key=key, value=value, line=None, source="--sweep")

    for key in FLAGS.values():
        value = getattr(args, key)
        if value is not None:
            entries[key] = ConfigEntry(key=key, value=value, line=None, source=_flag_of(key))
    return entries


def _config_error(e: ValidationError, entries: Dict[str, ConfigEntry]) -> ConfigError:
    err = e.errors()[0]
    loc = tuple(str(part) for part in err["loc"])
    key = ".".join(loc)
    for k in range(len(loc), 0, -1):
        if loc[:k] in LOCATIONS:
            key = LOCATIONS[loc[:k]]
            break

    entry = entries.get(key)
    where = ""
    if entry is not None:
        where = f" (line {entry.line} of {entry.source})" if entry.line else f" ({entry.source})"
    return ConfigError(
        f"invalid value for {key}: {err['msg']}{where}",
        key=key,
        line=entry.line if entry else None,
        source=entry.source if entry else "defaults",
        value=entry.value if entry else None,
    )


def resolve_config(command: str, args: argparse.Namespace) -> RunConfig:
    """defaults < config file < CLI flags"""
    entries: Dict[str, ConfigEntry] = {}
    if args.config:
        entries.update(read_config_file(args.config))
    entries.update(cli_entries(args))

    tree = nest({key: entry.value for key, entry in entries.items()})
    tree["command"] = command
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as e:
        raise _config_error(e, entries) from e


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s - %(levelname)s - %(message)s")

    try:
        cfg = resolve_config(args.command, args)
    except ConfigError as e:
        logger.error(f"[CLI] {e.message}")
        print(error_report(e).model_dump_json(), file=sys.stderr)
        return e.exit_code

    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
