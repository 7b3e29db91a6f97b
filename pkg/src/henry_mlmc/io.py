"""File formats: versioned CSV, lossless JSON and legacy-VTK structured points."""
from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
SCHEMA_PREFIX = "# henry-mlmc schema-version:"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dumps(obj, indent=None) -> str:
    """JSON text; floats use the shortest round-trip repr, so the encoding is lossless."""
    return json.dumps(_jsonable(obj), indent=indent, allow_nan=True, sort_keys=True)


def write_json(path, obj, indent=2):
    atomic_write(path, dumps(obj, indent) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    buf.write(f"{SCHEMA_PREFIX} {SCHEMA_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    atomic_write(path, csv_text(header, rows))


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith(SCHEMA_PREFIX):
            raise ValueError(f"{path} lacks the schema-version header")
        version = int(first[len(SCHEMA_PREFIX):])
        if version != SCHEMA_VERSION:
            raise ValueError(f"{path} has schema version {version}, expected {SCHEMA_VERSION}")
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def append_csv_row(path, header, row):
    """Append one row, creating the file with its header on first use."""
    path = Path(path)
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        if new:
            fh.write(f"{SCHEMA_PREFIX} {SCHEMA_VERSION}\n")
            csv.writer(fh, lineterminator="\n").writerow(header)
        csv.writer(fh, lineterminator="\n").writerow(
            [repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_vtk(path, grid, point_data: dict, cell_data: dict | None = None, title="henry-mlmc"):
    """Legacy ASCII STRUCTURED_POINTS file with vertex (and optional element) fields.

    Arrays of shape ``(n,)`` are written as scalars, ``(n, 2)`` as 3-D vectors.
    """
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET STRUCTURED_POINTS",
             f"DIMENSIONS {grid.nx + 1} {grid.ny + 1} 1",
             f"ORIGIN {grid.x[0]!r} {grid.y[0]!r} 0.0",
             f"SPACING {grid.hx!r} {grid.hy!r} 1.0"]

    def block(data, n):
        for name, arr in data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.shape[0] != n:
                raise ValueError(f"field {name!r} has {arr.shape[0]} entries, expected {n}")
            if arr.ndim == 1:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(repr(float(v)) for v in arr)
            else:
                lines.append(f"VECTORS {name} double")
                lines.extend(f"{a!r} {b!r} 0.0" for a, b in arr[:, :2].tolist())

    lines.append(f"POINT_DATA {grid.n_vertices}")
    block(point_data, grid.n_vertices)
    if cell_data:
        lines.append(f"CELL_DATA {grid.n_elements}")
        block(cell_data, grid.n_elements)
    atomic_write(path, "\n".join(lines) + "\n")


def read_vtk_scalars(path) -> dict[str, np.ndarray]:
    """Scalar fields of a file written by :func:`write_vtk` (used for round-trip checks)."""
    out = {}
    with open(path) as fh:
        toks = fh.read().split("\n")
    i = 0
    while i < len(toks):
        line = toks[i]
        if line.startswith(("POINT_DATA", "CELL_DATA")):
            n = int(line.split()[1])
        if line.startswith("SCALARS"):
            name = line.split()[1]
            out[name] = np.array([float(v) for v in toks[i + 2:i + 2 + n]])
            i += 2 + n
            continue
        i += 1
    return out
