"""CSV emission with round-trip numeric formatting."""

from __future__ import annotations

import csv
import io

import numpy as np

__all__ = ["format_value", "csv_text", "write_csv", "read_csv"]


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def csv_text(columns: dict) -> str:
    """Render equal-length columns (header row first) to CSV text."""
    names = list(columns)
    cols = [np.asarray(columns[k]) if not isinstance(columns[k], list) else columns[k] for k in names]
    lengths = {len(c) for c in cols}
    if len(lengths) > 1:
        raise ValueError(f"columns have unequal lengths {sorted(lengths)}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for row in zip(*cols):
        w.writerow([format_value(v) for v in row])
    return buf.getvalue()


def write_csv(path, columns: dict) -> str:
    text = csv_text(columns)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return text


def read_csv(path) -> dict:
    """Read a CSV written by :func:`write_csv`; numeric columns become arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    out = {}
    for j, name in enumerate(header):
        vals = [r[j] for r in body]
        try:
            out[name] = np.array([float(v) for v in vals])
        except ValueError:
            out[name] = vals
    return out
