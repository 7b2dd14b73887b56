"""Report files. Writes are atomic (temp file then rename) and float output is
deterministic, so two runs with the same seed give byte-identical bodies."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if v != v:
            return "nan"
        if v in (float("inf"), float("-inf")):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if v is None:
        return ""
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(format_value(x) for x in np.ravel(np.asarray(v, dtype=object)))
    return str(v)


def header_line(kind: str, scenario: str | None = None) -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    scen = f" scenario={scenario}" if scenario else ""
    return f"# levyipde {__version__} {kind}{scen} generated {stamp}"


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


def write_csv(path, rows, kind: str, scenario: str | None = None, columns=None) -> Path:
    """Write dict rows with a comment header line. Columns default to first-seen order."""
    rows = list(rows)
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(c for c in r if c not in columns)
    buf = io.StringIO()
    buf.write(header_line(kind, scenario) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_value(r.get(c)) for c in columns])
    return atomic_write_text(path, buf.getvalue())


def write_table(path, header, data, kind: str, scenario: str | None = None) -> Path:
    """Write a 2-D numeric array under ``header``."""
    buf = io.StringIO()
    buf.write(header_line(kind, scenario) + "\n")
    buf.write(",".join(header) + "\n")
    for row in np.asarray(data):
        buf.write(",".join(format_value(v) for v in row) + "\n")
    return atomic_write_text(path, buf.getvalue())


def read_csv(path):
    """Rows as dicts of strings, skipping comment lines."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def body(path) -> str:
    """File contents without the timestamped header line."""
    return "".join(ln for ln in Path(path).read_text().splitlines(keepends=True) if not ln.startswith("#"))
