"""JSON and CSV writers with a fixed number of significant digits."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

SIG_DIGITS = 12


def _round(x: float, digits: int) -> float | None:
    x = float(x)
    if not math.isfinite(x):
        return None
    return float(f"{x:.{digits}g}")


def rounded(obj, digits: int = SIG_DIGITS):
    """Recursively convert arrays to nested lists and round floats to ``digits`` significant digits.

    Non-finite floats become ``None`` so the output is strict JSON.
    """
    if isinstance(obj, dict):
        return {str(k): rounded(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [rounded(v, digits) for v in obj]
    if isinstance(obj, np.ndarray):
        return rounded(obj.tolist(), digits)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _round(obj, digits)
    return obj


def dump_json(obj, path, digits: int = SIG_DIGITS) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rounded(obj, digits), indent=2) + "\n")
    return path


def fmt(x: float, digits: int = SIG_DIGITS) -> str:
    return f"{float(x):.{digits}g}"


def write_csv(path, header: list[str], rows, digits: int = SIG_DIGITS) -> Path:
    """Write rows of numbers; integer-valued columns named in ``header`` as ``*_id`` stay integers."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    int_cols = {i for i, h in enumerate(header) if h.endswith("_id")}
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([str(int(v)) if i in int_cols else fmt(v, digits) for i, v in enumerate(row)])
    return path
