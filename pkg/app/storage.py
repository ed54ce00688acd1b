"""
Rail Rescheduling Engine - Storage
File persistence for structured-text inputs, CSV results and run manifests.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Type, TypeVar

import pandas as pd
import yaml
from pydantic import BaseModel, ValidationError

from app import __version__
from app.exceptions import NetworkFileError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

FLOAT_FORMAT = "%.9g"


def read_yaml(path: Path) -> Dict[str, Any]:
    """Read a YAML mapping from disk."""
    path = Path(path)
    if not path.exists():
        raise NetworkFileError(f"File not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise NetworkFileError(f"Failed to parse {path}: {str(e)}")
    if not isinstance(data, dict):
        raise NetworkFileError(f"Expected a mapping at the top of {path}")
    return data


def load_model(path: Path, model: Type[ModelT]) -> ModelT:
    """Read a YAML file and validate it against a pydantic model."""
    data = read_yaml(path)
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise NetworkFileError(f"Invalid {model.__name__} in {path}: {str(e)}")


def write_yaml(path: Path, data: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, sort_keys=False)
    return path


def read_csv(path: Path, columns: Optional[List[str]] = None) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise NetworkFileError(f"File not found: {path}")
    frame = pd.read_csv(path)
    if columns is not None:
        missing = [c for c in columns if c not in frame.columns]
        if missing:
            raise NetworkFileError(f"{path} is missing columns: {', '.join(missing)}")
    return frame


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    """Write a frame with a fixed float format so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.debug(f"Wrote {len(frame)} rows to {path}")
    return path


def write_text(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return path


def config_hash(payload: Dict[str, Any]) -> str:
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_manifest(path: Path, config: Dict[str, Any], seeds: Dict[str, Any]) -> Path:
    """Record what is needed to reproduce a run."""
    lines = [
        f"version: {__version__}",
        f"config_hash: {config_hash(config)}",
        f"seeds: {json.dumps(seeds, sort_keys=True)}",
        f"config: {json.dumps(config, sort_keys=True, default=str)}",
    ]
    return write_text(path, "\n".join(lines) + "\n")
