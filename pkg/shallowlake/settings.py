"""
Shallow Lake Settings
=====================
Process environment, documented defaults and the flat config-file reader.

Config files use dotenv syntax with dotted keys, one binding per line:

    # bimodal base point
    b=0.65
    c=0.5
    rate.kind=standard
    sweep.name=sigma

Unknown keys, unparsable lines and repeated keys are hard errors that name
the key (or statement) and the line. Precedence: CLI > file > defaults.
"""

import logging
import os
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Tuple

from dotenv import load_dotenv
from dotenv.parser import parse_stream

from errors import ConfigError

load_dotenv(dotenv_path=Path(__file__).resolve().parent.parent / ".env")

__version__ = "1.0.0"

LOG_LEVEL = os.getenv("LAKE_LOG_LEVEL", "INFO").upper()
AUDIT_FILE = os.getenv("LAKE_AUDIT_FILE", "lake_audit.jsonl")
ENABLE_AUDIT_FILE = os.getenv("ENABLE_LAKE_AUDIT_FILE", "false").lower() == "true"
DEFAULT_JOBS = int(os.getenv("LAKE_JOBS", "0") or 0) or (os.cpu_count() or 1)

logger = logging.getLogger(__name__)

# flat config key -> location inside RunConfig
CONFIG_KEYS: Dict[str, Tuple[str, ...]] = {
    "b": ("params", "b"),
    "c": ("params", "c"),
    "rho": ("params", "rho"),
    "sigma": ("params", "sigma"),
    "rate.kind": ("params", "rate", "kind"),
    "rate.center": ("params", "rate", "center"),
    "rate.slope": ("params", "rate", "slope"),
    "rate.scale": ("params", "rate", "scale"),
    "rate.threshold": ("params", "rate", "threshold"),
    "grid.l": ("grid", "l"),
    "grid.n": ("grid", "n"),
    "grid.closure": ("grid", "closure"),
    "solver.tol": ("solver", "tol"),
    "solver.max_iter": ("solver", "max_iter"),
    "sim.dt": ("sim", "dt"),
    "sim.horizon": ("sim", "horizon"),
    "sim.paths": ("sim", "n_paths"),
    "sim.seed": ("sim", "seed"),
    "sim.x0": ("sim", "x0"),
    "sim.substeps": ("sim", "substeps"),
    "sim.record_every": ("sim", "record_every"),
    "sim.burn_in": ("sim", "burn_in"),
    "sim.bias": ("sim", "bias"),
    "escape.samples": ("escape", "samples"),
    "escape.max_steps": ("escape", "max_steps"),
    "sweep.name": ("sweep", "name"),
    "sweep.start": ("sweep", "start"),
    "sweep.stop": ("sweep", "stop"),
    "sweep.count": ("sweep", "count"),
    "output.dir": ("output_dir",),
    "jobs": ("jobs",),
}

LOCATIONS = {path: key for key, path in CONFIG_KEYS.items()}


class ConfigEntry(NamedTuple):
    key: str
    value: str
    line: Optional[int]
    source: str


def read_config_file(path) -> Dict[str, ConfigEntry]:
    """Parse a flat KEY=VALUE file. Every entry keeps its line number."""
    entries: Dict[str, ConfigEntry] = {}
    try:
        stream = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}", path=str(path)) from e

    with stream:
        for binding in parse_stream(stream):
            line = binding.original.line
            statement = binding.original.string.strip()
            if binding.error:
                raise ConfigError(f"line {line}: cannot parse {statement!r}", line=line, statement=statement)
            if binding.key is None:
                continue
            key = binding.key
            if key not in CONFIG_KEYS:
                raise ConfigError(f"line {line}: unknown key {key!r}", key=key, line=line)
            if binding.value is None or binding.value == "":
                raise ConfigError(f"line {line}: key {key!r} has no value", key=key, line=line)
            if key in entries:
                raise ConfigError(
                    f"line {line}: key {key!r} already set on line {entries[key].line}",
                    key=key, line=line, first_line=entries[key].line,
                )
            entries[key] = ConfigEntry(key=key, value=binding.value, line=line, source=str(path))

    logger.info(f"[CONFIG] read {len(entries)} keys from {path}")
    return entries


def nest(flat: Dict[str, object]) -> Dict:
    """{'rate.kind': 'step'} -> {'params': {'rate': {'kind': 'step'}}}"""
    tree: Dict = {}
    for key, value in flat.items():
        path = CONFIG_KEYS[key]
        node = tree
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return tree
