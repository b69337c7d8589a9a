"""CSV and JSON serialization of results.

Floats are written with ``repr``, the shortest text that parses back to the
identical double (at most 17 significant digits).  Missing values in a CSV
column are written as empty fields and read back as NaN.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .stonybrook import HTauCurve

COLUMN_METHODS = {"h_full": "full-ME", "h_eff": "effective-H", "h_analytic_fit": "analytic",
                  "h_mc": "monte-carlo"}


def format_float(x) -> str:
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def write_columns_csv(path, columns: dict):
    names = list(columns)
    arrays = [np.asarray(columns[n], dtype=float) for n in names]
    n = {len(a) for a in arrays}
    if len(n) != 1:
        raise ValueError("all CSV columns must have the same length")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*arrays):
            w.writerow([format_float(v) for v in row])


def read_columns_csv(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    names = rows[0]
    data = {n: [] for n in names}
    for row in rows[1:]:
        if len(row) != len(names):
            raise ValueError(f"{path}: ragged row {row!r}")
        for n, v in zip(names, row):
            data[n].append(float(v) if v != "" else math.nan)
    return {n: np.array(v, dtype=float) for n, v in data.items()}


def curve_from_csv(path, column: str = "h_full") -> HTauCurve:
    """Read one ``h`` column of a curve CSV, skipping rows where it is empty."""
    data = read_columns_csv(path)
    if "tau" not in data or column not in data:
        raise ValueError(f"{path} lacks a 'tau' or {column!r} column")
    keep = ~np.isnan(data[column])
    method = COLUMN_METHODS.get(column, "full-ME")
    return HTauCurve(data["tau"][keep], data[column][keep], (method,) * int(keep.sum()))


def curve_to_csv(curve: HTauCurve, path, column: str = "h_full"):
    write_columns_csv(path, {"tau": curve.taus, column: curve.values})


def write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, allow_nan=True) + "\n", encoding="utf-8")


def complex_matrix(m) -> list:
    """Matrix as nested ``[re, im]`` pairs, row-major (same layout as configs)."""
    m = np.asarray(m)
    return [[[float(z.real), float(z.imag)] for z in row] for row in m]
