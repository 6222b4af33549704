"""Canonical JSON artifact reading and writing."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import TypeVar

from pydantic import BaseModel, ValidationError

from src.core.exceptions import MalformedConfigError

logger = logging.getLogger(__name__)

RecordT = TypeVar("RecordT", bound=BaseModel)


def dumps_canonical(record: BaseModel) -> bytes:
    """Sorted-key, indented JSON with a trailing newline."""
    text = json.dumps(record.model_dump(mode="json"), sort_keys=True, indent=2)
    return (text + "\n").encode("utf-8")


def loads_record(raw: bytes, model: type[RecordT]) -> RecordT:
    """Parse and validate an artifact, raising ``MalformedConfigError``."""
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedConfigError(f"Invalid JSON for {model.__name__}: {e}") from e
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise MalformedConfigError(f"Invalid {model.__name__}: {e}") from e


def write_record(path: Path, record: BaseModel) -> Path:
    """Write ``record`` canonically to ``path``, creating parent directories."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_canonical(record))
    logger.debug(f"Wrote {path}")
    return path


def read_record(path: Path, model: type[RecordT]) -> RecordT:
    """Read and validate an artifact file."""
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise MalformedConfigError(f"Cannot read {path}: {e}") from e
    try:
        return loads_record(raw, model)
    except MalformedConfigError as e:
        raise MalformedConfigError(f"{path}: {e}") from e
