"""Deterministic text artifacts: CSV/JSON writers and run-directory handling.

Floats are written with Python's ``repr``, the shortest string that parses
back to the same double, so reruns produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence


class RunDirExists(FileExistsError):
    pass


def fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if value is None:
        return ""
    v = float(value)
    if math.isnan(v):
        return "nan"
    return repr(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def _clean(obj):
    # JSON has no NaN; missing measurements become null
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path: str | Path, doc) -> None:
    text = json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


def new_run_dir(path: str | Path) -> Path:
    """Create ``path`` for a fresh run; an existing non-empty directory is refused."""
    p = Path(path)
    if p.exists() and any(p.iterdir()):
        raise RunDirExists(f"run directory {p} already holds artifacts")
    p.mkdir(parents=True, exist_ok=True)
    return p
