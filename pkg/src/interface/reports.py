"""
Run reports and output files of the command-line interface.
"""

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
import pandas as pd

from utils.logger import setup_logger

# Report writes share the CLI log file
logger = setup_logger(name="reports", log_filename="cli.log")


def _to_builtin(value: Any) -> Any:
    """json.dumps hook for numpy scalars and arrays."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def to_json(payload: Any) -> bytes:
    """
    Serialize a payload to UTF-8 JSON.

    Keys are sorted and the output ends with a newline, so equal payloads
    always give identical bytes. Numpy values are converted to builtins.
    """
    return (json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False, default=_to_builtin) + "\n").encode("utf-8")


def digest_inputs(*blobs: bytes) -> str:
    """SHA-256 over the input files, each prefixed by its length."""
    digest = hashlib.sha256()
    for blob in blobs:
        digest.update(len(blob).to_bytes(8, "big"))
        digest.update(blob)
    return digest.hexdigest()


@dataclass
class RunReport:
    """
    Machine-readable record of one command.

    Everything except `duration_seconds` is a deterministic function of the
    inputs, the configuration and the seed.
    """

    solver: str
    input_digest: str
    config: Dict[str, Any]
    results: Dict[str, Any]
    trace: Union[Dict[str, Any], List[Dict[str, Any]], None] = None
    duration_seconds: float = 0.0
    outputs: List[str] = field(default_factory=list)
    summary: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "solver": self.solver,
            "input_digest": self.input_digest,
            "config": self.config,
            "results": self.results,
            "trace": self.trace,
            "duration_seconds": round(self.duration_seconds, 6),
        }


def write_atomic(path: Union[str, Path], data: bytes) -> Path:
    """Write through a temporary file in the target directory, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = tempfile.NamedTemporaryFile(dir=path.parent, prefix=f".{path.name}.", delete=False)
    try:
        with handle:
            handle.write(data)
        os.replace(handle.name, path)
    except BaseException:
        if os.path.exists(handle.name):
            os.unlink(handle.name)
        raise
    logger.info(f"Wrote {path}")
    return path


def write_json(path: Union[str, Path], payload: Any) -> Path:
    """
    Write `payload` as JSON to `path` atomically.

    Parameters
    ----------
    path : str or Path
        Destination file; parent directories are created.
    payload : Any
        JSON-serializable value, numpy scalars and arrays included.

    Returns
    -------
    Path
        The written path.
    """
    return write_atomic(path, to_json(payload))


def write_table(path: Union[str, Path], frame: pd.DataFrame) -> Path:
    return write_atomic(path, frame.to_csv(sep="\t", index=False, float_format="%.10g").encode("utf-8"))
