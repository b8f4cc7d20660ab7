"""
Shallow Lake Outputs
====================
CSV tables, JSON sidecars and the run manifest.

Every file written through an OutputWriter is recorded with its sha256 so
the manifest lists all outputs of a run and nothing else.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd
from pydantic import BaseModel

from errors import ConfigError
from schemas import ErrorReport, Manifest, ManifestFile

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class OutputWriter:
    """Writes into one output directory and remembers what it wrote."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"output directory {self.out_dir} is not writable: {e}", key="output.dir") from e
        self.files: List[str] = []

    def _record(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.out_dir / name

    def write_csv(self, name: str, rows, columns: Sequence[str]) -> Path:
        """rows: DataFrame, list of dicts or dict of columns; header is exactly `columns`"""
        frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows, columns=list(columns))
        path = self._record(name)
        frame.to_csv(path, columns=list(columns), index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        logger.info(f"[CLI] wrote {path} ({len(frame)} rows)")
        return path

    def write_json(self, name: str, payload) -> Path:
        path = self._record(name)
        if isinstance(payload, BaseModel):
            text = payload.model_dump_json(indent=2)
        else:
            text = json.dumps(payload, indent=2, ensure_ascii=False)
        path.write_text(text + "\n", encoding="utf-8")
        logger.info(f"[CLI] wrote {path}")
        return path

    def manifest_files(self) -> List[ManifestFile]:
        entries = []
        for name in self.files:
            path = self.out_dir / name
            entries.append(ManifestFile(name=name, sha256=sha256_file(path), bytes=path.stat().st_size))
        return entries

    def write_manifest(self, manifest: Manifest) -> Path:
        # the manifest describes the other files, never itself
        path = self.out_dir / "manifest.json"
        path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return path

    def write_error(self, report: ErrorReport) -> Path:
        return self.write_json("error.json", report)


def error_report(e: Exception, exit_code: Optional[int] = None) -> ErrorReport:
    """Machine-readable error for stderr and error.json"""
    payload = e.to_dict() if hasattr(e, "to_dict") else {"error": e.__class__.__name__, "message": str(e)}
    return ErrorReport(
        error=payload.get("error", e.__class__.__name__),
        message=payload.get("message", str(e)),
        exit_code=exit_code if exit_code is not None else getattr(e, "exit_code", 1),
        detail=payload.get("detail", {}),
    )
