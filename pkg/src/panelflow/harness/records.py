"""Output writers.  Floats go out with 17 significant digits everywhere."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np


def _num(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    text = f"{x:.17g}"
    # keep floats recognizable as floats
    return text if any(c in text for c in ".en") else text + ".0"


def to_json(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with 17-digit floats; NaN and infinities become null."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {to_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if not seq:
            return "[]"
        items = [f"{pad}{to_json(v, indent, _level + 1)}" for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(to_json(obj) + "\n")
    return path


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else f"{float(v):.17g}"
    return str(v)


def write_csv(path, header, rows, preamble: str = "") -> Path:
    """CSV with ``#`` preamble lines before the header; None and NaN stay empty."""
    path = Path(path)
    lines = [preamble.rstrip("\n")] if preamble else []
    lines.append(",".join(header))
    lines.extend(",".join(_cell(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_csv(path) -> tuple[list, list]:
    """Header and rows of a file written by :func:`write_csv`.

    Empty cells come back as None, numeric cells as floats, anything else as text.
    """
    body = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    header = body[0].split(",")
    return header, [[_parse_cell(c) for c in ln.split(",")] for ln in body[1:]]


def _parse_cell(text: str):
    if not text:
        return None
    try:
        return float(text)
    except ValueError:
        return text
