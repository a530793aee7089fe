"""Shared errors, logging, serialization and seeding helpers for the NGDB pipeline."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import sys
import unicodedata
import zlib
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import pandas as pd

FORMAT_VERSION = 1
LOG_LEVEL_ENV = "NGDB_LOG_LEVEL"
RNG_ALGORITHM = "numpy.PCG64+SeedSequence/v1"

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_SAMPLING = 3
EXIT_DIVERGED = 4
EXIT_UNSUPPORTED = 5


class NGDBError(Exception):
    """Base class for every domain failure; carries the CLI exit code."""

    exit_code = 1


class ParseError(NGDBError):
    exit_code = EXIT_PARSE

    def __init__(self, message: str, *, path: Path | str | None = None, line_no: int | None = None) -> None:
        location = ""
        if path is not None:
            location = f"{path}"
            if line_no is not None:
                location += f":{line_no}"
            location += ": "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line_no = line_no


class InvalidInputError(NGDBError):
    exit_code = EXIT_PARSE


class ValidationError(NGDBError):
    exit_code = EXIT_PARSE


class FormatError(NGDBError):
    exit_code = EXIT_PARSE


class SamplingExhaustedError(NGDBError):
    exit_code = EXIT_SAMPLING


class TrainingDivergedError(NGDBError):
    exit_code = EXIT_DIVERGED

    def __init__(self, message: str, *, epoch: int, batch_index: int) -> None:
        super().__init__(f"{message} (epoch {epoch}, batch {batch_index})")
        self.epoch = epoch
        self.batch_index = batch_index


class UnsupportedPatternError(NGDBError):
    exit_code = EXIT_UNSUPPORTED


class UnsupportedOperatorError(NGDBError):
    exit_code = EXIT_UNSUPPORTED


class BoundsError(NGDBError, IndexError):
    pass


class InvalidStateError(NGDBError):
    pass


class DomainError(NGDBError, ValueError):
    pass


class ContractViolationError(NGDBError):
    pass


class UndefinedMetricError(NGDBError):
    pass


_HANDLER: logging.Handler | None = None


def get_logger(stage: str) -> logging.Logger:
    """Return the stage logger; the first call installs the shared stderr handler."""
    global _HANDLER
    root = logging.getLogger("ngdb")
    if _HANDLER is None:
        _HANDLER = logging.StreamHandler(sys.stderr)
        _HANDLER.setFormatter(logging.Formatter("[%(stage)s] %(message)s"))
        _HANDLER.addFilter(_StageFilter())
        root.addHandler(_HANDLER)
        root.propagate = False
    level_name = os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    root.setLevel(getattr(logging, level_name, logging.INFO))
    return root.getChild(stage)


class _StageFilter(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:
        record.stage = record.name.rsplit(".", 1)[-1]
        return True


def clean_text(value: Any) -> str:
    """Normalize whitespace and unicode for deterministic string handling."""
    if value is None:
        return ""
    if not isinstance(value, str):
        value = str(value)
    text = unicodedata.normalize("NFKC", value)
    text = text.replace("\n", " ").replace("\r", " ").strip()
    text = re.sub(r"\s+", " ", text)
    return text


def stream_key(name: int | str) -> int:
    if isinstance(name, int):
        return name
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, *streams: int | str) -> np.random.Generator:
    """Seeded PCG64 generator for a named sub-stream of `seed`."""
    if seed < 0:
        raise InvalidInputError(f"Seed must be non-negative, got {seed}")
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(stream_key(s) for s in streams))
    return np.random.Generator(np.random.PCG64(sequence))


def sanitize_json_value(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return None if not math.isfinite(float(value)) else float(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, dict):
        return {str(k): sanitize_json_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [sanitize_json_value(v) for v in value]
    return value


def write_json(path: Path, payload: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(sanitize_json_value(payload), indent=2) + "\n", encoding="utf-8")


def write_jsonl(path: Path, records: Iterable[dict[str, Any]]) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        for record in records:
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")
            count += 1
    return count


def read_jsonl_lines(path: Path) -> list[tuple[int, str]]:
    """Return (line number, text) pairs for the non-blank lines of a JSONL file."""
    if not path.exists():
        raise InvalidInputError(f"Required file not found: {path}")
    lines: list[tuple[int, str]] = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if line.strip():
                lines.append((line_no, line))
    return lines


def sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        while True:
            chunk = handle.read(8192)
            if not chunk:
                break
            digest.update(chunk)
    return digest.hexdigest()


def write_dataframe_with_parquet_fallback(df: pd.DataFrame, parquet_path: Path) -> dict[str, Any]:
    """Write parquet when available; otherwise write CSV fallback and metadata note."""
    parquet_path.parent.mkdir(parents=True, exist_ok=True)
    csv_fallback_path = parquet_path.with_suffix(parquet_path.suffix + ".csv")
    metadata_path = parquet_path.with_suffix(parquet_path.suffix + ".meta.json")

    metadata: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "target_parquet": str(parquet_path),
        "fallback_csv": str(csv_fallback_path),
        "parquet_written": False,
        "row_count": int(df.shape[0]),
        "column_count": int(df.shape[1]),
    }

    try:
        df.to_parquet(parquet_path, index=False)
        metadata["parquet_written"] = True
        if csv_fallback_path.exists():
            csv_fallback_path.unlink()
    except Exception as exc:  # noqa: BLE001 - explicit fallback path
        df.to_csv(csv_fallback_path, index=False)
        metadata["parquet_error"] = str(exc)

    write_json(metadata_path, metadata)
    return metadata
