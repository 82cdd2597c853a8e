"""CSV helpers: optional ``# key: value`` comment lines, one header row, then numbers."""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np


def comment_lines(meta: dict | None) -> str:
    return "".join(f"# {k}: {v}\n" for k, v in (meta or {}).items())


def write_matrix_csv(path, columns, M, meta: dict | None = None):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    buf = io.StringIO()
    buf.write(comment_lines(meta))
    buf.write(",".join(columns) + "\n")
    for row in M:
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    Path(path).write_text(buf.getvalue())


def read_matrix_csv(path):
    """``(columns, matrix, meta)`` from a file written by :func:`write_matrix_csv`."""
    meta, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            meta[key.strip()] = val.strip()
        elif line.strip():
            body.append(line)
    if not body:
        raise ValueError(f"{path}: no header row")
    columns = body[0].split(",")
    if len(body) == 1:
        return columns, np.empty((0, len(columns))), meta
    M = np.loadtxt(io.StringIO("\n".join(body[1:])), delimiter=",", ndmin=2)
    return columns, M, meta


def write_json(path, obj, meta: dict | None = None):
    Path(path).write_text(json.dumps({**(meta or {}), **obj}, indent=2, sort_keys=True, default=_default))


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
