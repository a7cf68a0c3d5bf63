"""CSV tables with a one-line JSON metadata header.

The first line is ``# {json}`` describing axes and units; the rest is a plain
CSV with a header row.  Floats are written with ``repr`` so files are
bit-stable across runs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fes import FESGrid


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_table(path, meta: dict, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True, default=_json_default) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(v) for v in r])
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def read_table(path) -> tuple[dict, list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ValueError(f"{path}: missing JSON header line")
        meta = json.loads(first[2:])
        rows = list(csv.reader(fh))
    return meta, rows[0], rows[1:]


def write_fes(path, grid: FESGrid, meta: dict | None = None) -> Path:
    """One row per bin: bin centres, probability and free energy (blank if unoccupied)."""
    centres = [(e[:-1] + e[1:]) / 2 for e in grid.edges]
    axes = [f"x{i}" for i in range(len(centres))]
    info = {"kind": "fes", "axes": axes, "units": "energy (kB = %g)" % grid.kB,
            "temperature": grid.temperature, "n_samples": grid.n_samples,
            "bins": [len(c) for c in centres]}
    info.update(meta or {})
    rows = []
    for idx in np.ndindex(grid.shape):
        g = grid.G[idx]
        rows.append([centres[a][i] for a, i in enumerate(idx)]
                    + [grid.p[idx], "" if np.isnan(g) else g])
    return write_table(path, info, axes + ["p", "G"], rows)


def write_matrix(path, M, meta: dict | None = None) -> Path:
    M = np.asarray(M)
    info = {"kind": "matrix", "shape": list(M.shape)}
    info.update(meta or {})
    return write_table(path, info, [f"c{j}" for j in range(M.shape[1])], M.tolist())
