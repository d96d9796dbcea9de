"""Deterministic CSV and text artifacts, each written atomically."""

from __future__ import annotations

import csv
import io
import os
import tempfile

import numpy as np


def fmt(value):
    """17 significant digits for floats so doubles round-trip exactly."""
    if isinstance(value, (float, np.floating)):
        return "%.17g" % value
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def _atomic_write(path, text):
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    _atomic_write(path, buf.getvalue())


def write_text(path, text):
    _atomic_write(path, text)


def process_rows(proc, extra=()):
    """``(stage, node_id, component, value, *extra)`` rows; components of matrix values are ``i:j``."""
    for k in proc.stages:
        vals = proc[k]
        for node in range(vals.shape[0]):
            for idx in np.ndindex(*vals.shape[1:]):
                comp = ":".join(str(i) for i in idx) if len(idx) != 1 else idx[0]
                yield (k, node, comp, float(vals[(node,) + idx])) + tuple(extra)
