"""Field snapshots: a per-cell CSV and a legacy-VTK unstructured grid.

CSV layout (one header line, one row per cell)::

    cell,x,y,z,p,s

Values are written with 17 significant digits, so reading the file back
reproduces every double exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .grid import Mesh

CSV_HEADER = "cell,x,y,z,p,s"
_VTK_VOXEL = 11
_VTK_VERTEX = 1


def _centroids3(mesh: Mesh) -> np.ndarray:
    c = np.asarray(mesh.centroids, dtype=float)
    if c.shape[1] < 3:
        c = np.hstack([c, np.zeros((len(c), 3 - c.shape[1]))])
    return c


def write_fields_csv(path, mesh: Mesh, p, s) -> Path:
    path = Path(path)
    c = _centroids3(mesh)
    data = np.column_stack([np.arange(mesh.n_cells), c, np.asarray(p, float), np.asarray(s, float)])
    fmt = ["%d"] + ["%.17g"] * 5
    np.savetxt(path, data, delimiter=",", header=CSV_HEADER, comments="", fmt=fmt)
    return path


def read_fields(path) -> dict:
    """Inverse of :func:`write_fields_csv`; returns arrays keyed by column name."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    out = {name: data[:, j] for j, name in enumerate(header)}
    out["cell"] = out["cell"].astype(np.int64)
    return out


def write_vtk(path, mesh: Mesh, p, s, spacing=None) -> Path:
    """Legacy ASCII VTK.  With ``spacing`` every cell is a voxel of that size
    centred at its centroid; otherwise cells are vertices at the centroids."""
    path = Path(path)
    c = _centroids3(mesh)
    n = mesh.n_cells
    lines = ["# vtk DataFile Version 3.0", "fasflow cell fields", "ASCII", "DATASET UNSTRUCTURED_GRID"]
    if spacing is not None:
        h = np.ones(3)
        sp_ = np.asarray(spacing, float).ravel()
        h[:len(sp_)] = sp_
        if mesh.dimension == 2 and len(sp_) < 3:
            h[2] = 1.0
        # voxel point order: x fastest, then y, then z
        corners = np.array([[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)], dtype=float) - 0.5
        pts = (c[:, None, :] + corners[None, :, :] * h).reshape(-1, 3)
        lines.append(f"POINTS {len(pts)} double")
        lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in pts]
        lines.append(f"CELLS {n} {9 * n}")
        lines += ["8 " + " ".join(str(8 * K + v) for v in range(8)) for K in range(n)]
        ctype = _VTK_VOXEL
    else:
        lines.append(f"POINTS {n} double")
        lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in c]
        lines.append(f"CELLS {n} {2 * n}")
        lines += [f"1 {K}" for K in range(n)]
        ctype = _VTK_VERTEX
    lines.append(f"CELL_TYPES {n}")
    lines += [str(ctype)] * n
    lines.append(f"CELL_DATA {n}")
    for name, vals in (("pressure", p), ("saturation", s)):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [f"{v:.17g}" for v in np.asarray(vals, float)]
    path.write_text("\n".join(lines) + "\n")
    return path


def emit_fields(state, mesh: Mesh, path, spacing=None) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.vtk`` for the cell pressure and saturation."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    stem = base.with_suffix("") if base.suffix in (".csv", ".vtk") else base
    csv = write_fields_csv(stem.with_name(stem.name + ".csv"), mesh, state.p, state.s)
    vtk = write_vtk(stem.with_name(stem.name + ".vtk"), mesh, state.p, state.s, spacing)
    return csv, vtk


def parse_vtk(path) -> dict:
    """Minimal legacy-VTK reader used to validate written files.

    Checks the header, section keywords and counts; returns points, cells,
    cell types and cell scalars.
    """
    tokens_by_line = [ln.split() for ln in Path(path).read_text().splitlines()]
    if not tokens_by_line or not " ".join(tokens_by_line[0]).startswith("# vtk DataFile Version"):
        raise ValueError("missing legacy VTK header")
    if tokens_by_line[2] != ["ASCII"] or tokens_by_line[3] != ["DATASET", "UNSTRUCTURED_GRID"]:
        raise ValueError("expected ASCII UNSTRUCTURED_GRID")
    flat = [t for ln in tokens_by_line[4:] for t in ln]
    pos = 0

    def take(k):
        nonlocal pos
        out = flat[pos:pos + k]
        if len(out) != k:
            raise ValueError("truncated VTK file")
        pos += k
        return out

    out = {"scalars": {}}
    kw, npts, _ = take(3)
    if kw != "POINTS":
        raise ValueError("POINTS section expected")
    out["points"] = np.array(take(3 * int(npts)), float).reshape(-1, 3)
    kw, ncell, size = take(3)
    if kw != "CELLS":
        raise ValueError("CELLS section expected")
    conn = np.array(take(int(size)), dtype=np.int64)
    cells, i = [], 0
    while i < len(conn):
        cells.append(conn[i + 1:i + 1 + conn[i]])
        i += conn[i] + 1
    if len(cells) != int(ncell):
        raise ValueError("CELLS count mismatch")
    if any(np.any(cc >= len(out["points"])) for cc in cells):
        raise ValueError("cell references a missing point")
    out["cells"] = cells
    kw, nt = take(2)
    if kw != "CELL_TYPES" or int(nt) != int(ncell):
        raise ValueError("CELL_TYPES section mismatch")
    out["cell_types"] = np.array(take(int(nt)), dtype=np.int64)
    kw, nd = take(2)
    if kw != "CELL_DATA" or int(nd) != int(ncell):
        raise ValueError("CELL_DATA section mismatch")
    while pos < len(flat):
        kw, name, _dtype, *_ = take(4)
        if kw != "SCALARS":
            raise ValueError(f"unexpected keyword {kw}")
        if take(2) != ["LOOKUP_TABLE", "default"]:
            raise ValueError("LOOKUP_TABLE expected")
        out["scalars"][name] = np.array(take(int(nd)), float)
    return out
