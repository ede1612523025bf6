"""CSV and report files written atomically (temporary file plus rename)."""

from __future__ import annotations

import csv
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv(path, header, rows) -> Path:
    """Header plus rows; floats are written with round-trip precision and LF endings."""
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError("row length does not match header")
        lines.append(",".join(_fmt(v) for v in row))
    return atomic_write_text(path, "\n".join(lines) + "\n")


def write_columns(path, columns: dict) -> Path:
    header = list(columns)
    arrays = [np.asarray(v).ravel() if not isinstance(v, list) else v for v in columns.values()]
    n = {len(a) for a in arrays}
    if len(n) != 1:
        raise ValueError("columns differ in length")
    return write_csv(path, header, zip(*arrays))


def read_csv(path) -> tuple[list[str], list[list]]:
    """Header and rows, with numeric fields converted to float."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = []
        for raw in reader:
            row = []
            for field in raw:
                try:
                    row.append(float(field))
                except ValueError:
                    row.append(field)
            rows.append(row)
    return header, rows


def read_columns(path) -> dict:
    header, rows = read_csv(path)
    cols = list(zip(*rows)) if rows else [[] for _ in header]
    out = {}
    for name, col in zip(header, cols):
        try:
            out[name] = np.asarray(col, dtype=float)
        except (TypeError, ValueError):
            out[name] = list(col)
    return out


def write_report(path, report: dict) -> Path:
    return atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialise {type(v).__name__}")
