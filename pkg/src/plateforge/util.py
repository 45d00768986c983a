"""Shared helpers: seeding, rounding, and JSONL I/O."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np


def rng_for(*key: int) -> np.random.Generator:
    """Independent generator for a seed key.

    Built on ``numpy.random.SeedSequence`` so streams derived from distinct
    keys are statistically independent and identical keys always yield the
    same stream, regardless of call order or worker scheduling.
    """
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def round_half_away(x: float) -> int:
    """Round to nearest integer, halves away from zero."""
    return int(math.floor(x + 0.5)) if x >= 0 else int(math.ceil(x - 0.5))


def fmt1(x: float) -> str:
    """Format with one decimal, halves rounded away from zero."""
    return f"{round_half_away(x * 10) / 10:.1f}"


def read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield (line_number, record) pairs; line numbers are 1-based."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            yield lineno, json.loads(line)


def write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    """Write records as JSON Lines with stable key order. Returns the count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
            n += 1
    return n


def config_hash(obj: Any) -> str:
    """Stable short hash of a JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, ensure_ascii=False, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
