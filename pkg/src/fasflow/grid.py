"""Fine-level cell/face meshes with geometric one-sided transmissibilities.

A :class:`Mesh` stores cells and interior faces as flat numpy arrays.  Every
interior face references two distinct cells ``K < L`` and carries a unit
normal oriented from ``K`` to ``L``.  Boundary faces are not stored: the outer
boundary is no-flow.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Raised for inconsistent or inadmissible mesh input."""


@dataclass(frozen=True)
class Cell:
    volume: float
    centroid: np.ndarray
    permeability: np.ndarray
    porosity: float


@dataclass(frozen=True)
class Face:
    area: float
    centroid: np.ndarray
    unit_normal: np.ndarray
    cell_K: int
    cell_L: int
    half_transmissibility_K: float
    half_transmissibility_L: float


def half_transmissibility(permeability, cell_centroid, face_centroid, face_area, face_normal):
    """One-sided geometric transmissibility of a cell towards one of its faces.

    ``face_normal`` must be the outer unit normal of the cell on that face.
    Returns ``|e| * n.K.(x_e - x_i) / |x_e - x_i|^2``.
    """
    K = np.atleast_2d(np.asarray(permeability, dtype=float))
    d = np.asarray(face_centroid, dtype=float) - np.asarray(cell_centroid, dtype=float)
    dist2 = float(d @ d)
    if dist2 == 0.0:
        raise MeshError("face collocation point coincides with the cell centroid")
    value = float(face_area) * float(np.asarray(face_normal, dtype=float) @ K @ d) / dist2
    if not value > 0.0:
        raise MeshError(f"non-positive half transmissibility {value!r}")
    return value


@dataclass(frozen=True)
class CellGraph:
    """Cell-connectivity graph restricted to a subset of cells.

    ``vertices[v]`` is the mesh cell index of graph vertex ``v``; ``adjacency``
    is a symmetric 0/1 CSR matrix over graph vertices.
    """

    vertices: np.ndarray
    adjacency: sp.csr_matrix

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.nnz // 2)

    def neighbors(self, v: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[v]:a.indptr[v + 1]]


def graph_from_edges(n: int, edges: np.ndarray, vertices=None) -> CellGraph:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    adj.sum_duplicates()
    adj.data[:] = 1.0
    if vertices is None:
        vertices = np.arange(n)
    return CellGraph(np.asarray(vertices), adj)


@dataclass
class Mesh:
    """Unstructured fine mesh.

    Cell arrays have leading dimension ``n_cells``; face arrays have leading
    dimension ``n_faces``.  ``half_trans[:, 0]`` belongs to cell ``K`` and
    ``half_trans[:, 1]`` to cell ``L``.
    """

    volumes: np.ndarray
    centroids: np.ndarray
    permeability: np.ndarray
    porosity: np.ndarray
    face_cells: np.ndarray
    face_areas: np.ndarray
    face_centroids: np.ndarray
    face_normals: np.ndarray
    half_trans: np.ndarray = field(default=None)
    dimension: int = 3
    shape: tuple | None = None
    active_index: np.ndarray | None = None

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=float)
        self.centroids = np.asarray(self.centroids, dtype=float).reshape(len(self.volumes), -1)
        self.porosity = np.asarray(self.porosity, dtype=float)
        self.permeability = _as_tensors(self.permeability, len(self.volumes), self.centroids.shape[1])
        fc = np.asarray(self.face_cells, dtype=np.int64).reshape(-1, 2)
        self.face_cells = fc
        self.face_areas = np.asarray(self.face_areas, dtype=float)
        d = self.centroids.shape[1]
        self.face_centroids = np.asarray(self.face_centroids, dtype=float).reshape(len(fc), d)
        self.face_normals = np.asarray(self.face_normals, dtype=float).reshape(len(fc), d)
        self.dimension = self.centroids.shape[1]
        self._validate()
        if self.half_trans is None:
            self.half_trans = self._compute_half_trans()
        else:
            self.half_trans = np.asarray(self.half_trans, dtype=float).reshape(-1, 2)

    def _validate(self):
        n = self.n_cells
        if len(self.porosity) != n or len(self.permeability) != n:
            raise MeshError("cell field length mismatch")
        if np.any(self.volumes <= 0):
            raise MeshError("cell volumes must be positive")
        if np.any((self.porosity <= 0) | (self.porosity > 1)):
            raise MeshError("porosity must lie in (0, 1]")
        fc = self.face_cells
        if len(fc):
            if np.any(fc[:, 0] >= fc[:, 1]):
                raise MeshError("faces must reference two distinct cells with K < L")
            if fc.min() < 0 or fc.max() >= n:
                raise MeshError("face references a cell outside the mesh")
        if np.any(self.face_areas <= 0):
            raise MeshError("face areas must be positive")
        norms = np.linalg.norm(self.face_normals, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-12):
            raise MeshError("face normals must have unit length")
        _check_spd(self.permeability)

    def _compute_half_trans(self) -> np.ndarray:
        ht = np.empty((self.n_faces, 2))
        for i, (k, l) in enumerate(self.face_cells):
            n = self.face_normals[i]
            a = self.face_areas[i]
            x = self.face_centroids[i]
            ht[i, 0] = half_transmissibility(self.permeability[k], self.centroids[k], x, a, n)
            ht[i, 1] = half_transmissibility(self.permeability[l], self.centroids[l], x, a, -n)
        return ht

    @property
    def n_cells(self) -> int:
        return len(self.volumes)

    @property
    def n_faces(self) -> int:
        return len(self.face_cells)

    @property
    def pore_volumes(self) -> np.ndarray:
        return self.porosity * self.volumes

    @property
    def cells(self) -> list[Cell]:
        return [Cell(self.volumes[i], self.centroids[i], self.permeability[i], self.porosity[i])
                for i in range(self.n_cells)]

    @property
    def interior_faces(self) -> list[Face]:
        return [Face(self.face_areas[i], self.face_centroids[i], self.face_normals[i],
                     int(k), int(l), self.half_trans[i, 0], self.half_trans[i, 1])
                for i, (k, l) in enumerate(self.face_cells)]

    @property
    def cell_adjacency(self) -> CellGraph:
        return cell_connectivity_graph(self)

    def cell_index(self, i: int, j: int, k: int = 0) -> int:
        """Active-cell index of Cartesian position ``(i, j, k)`` (Cartesian meshes only)."""
        if self.shape is None:
            raise MeshError("mesh has no Cartesian structure")
        nx, ny, _ = self.shape
        flat = i + nx * (j + ny * k)
        idx = int(self.active_index[flat]) if self.active_index is not None else flat
        if idx < 0:
            raise MeshError(f"cell ({i}, {j}, {k}) is inactive")
        return idx


def _as_tensors(perm, n: int, dim: int) -> np.ndarray:
    perm = np.asarray(perm, dtype=float)
    if perm.ndim == 1:
        if len(perm) != n:
            raise MeshError("permeability field length mismatch")
        return perm[:, None, None] * np.eye(dim)[None]
    if perm.ndim == 2:
        if perm.shape[0] != n:
            raise MeshError("permeability field length mismatch")
        if perm.shape[1] == dim:
            return np.einsum("ni,ij->nij", perm, np.eye(dim))
        if perm.shape[1] == dim * (dim + 1) // 2:
            return _from_upper_triangle(perm, dim)
        raise MeshError(f"cannot interpret permeability of shape {perm.shape}")
    if perm.ndim == 3:
        if perm.shape[0] != n:
            raise MeshError("permeability field length mismatch")
        if perm.shape[1:] == (dim, dim):
            return perm.copy()
        if perm.shape[1] >= dim and perm.shape[2] >= dim:
            return perm[:, :dim, :dim].copy()
    raise MeshError(f"cannot interpret permeability of shape {perm.shape}")


def _from_upper_triangle(values: np.ndarray, dim: int) -> np.ndarray:
    iu = np.triu_indices(dim)
    out = np.zeros((len(values), dim, dim))
    out[:, iu[0], iu[1]] = values
    out[:, iu[1], iu[0]] = values
    return out


def upper_triangle(tensors: np.ndarray) -> np.ndarray:
    dim = tensors.shape[1]
    iu = np.triu_indices(dim)
    return tensors[:, iu[0], iu[1]]


def _check_spd(tensors: np.ndarray):
    if not np.allclose(tensors, np.transpose(tensors, (0, 2, 1))):
        raise MeshError("permeability tensors must be symmetric")
    if len(tensors) and np.linalg.eigvalsh(tensors).min() <= 0:
        raise MeshError("permeability tensors must be positive definite")


def build_cartesian_mesh(nx: int, ny: int, nz: int = 1, spacing=(1.0, 1.0, 1.0),
                         perm_field=None, poro_field=None, pv_threshold: float = 0.0) -> Mesh:
    """Axis-aligned hexahedral mesh, cell-ordered x fastest, then y, then z.

    With ``nz == 1`` the mesh is two-dimensional and the third spacing entry
    acts as the layer thickness.  Cells whose pore volume is below
    ``pv_threshold`` are dropped together with their faces.
    """
    if min(nx, ny, nz) < 1:
        raise MeshError("cell counts must be >= 1")
    n = nx * ny * nz
    dx, dy, dz = (float(h) for h in spacing)
    dim = 2 if nz == 1 else 3
    if perm_field is None:
        perm_field = np.ones(n)
    if poro_field is None:
        poro_field = np.ones(n)
    perm = np.asarray(perm_field, dtype=float)
    poro = np.asarray(poro_field, dtype=float).ravel()
    if len(perm) != n or len(poro) != n:
        raise MeshError(f"field lengths must equal nx*ny*nz = {n}")
    if perm.ndim == 3 and dim == 2 and perm.shape[1] == 3:
        perm = perm[:, :2, :2]
    elif perm.ndim == 2 and dim == 2 and perm.shape[1] == 3:
        perm = perm[:, :2]
    tensors = _as_tensors(perm, n, dim)
    _check_spd(tensors)

    I, J, L = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    I, J, L = (a.transpose(2, 1, 0).ravel() for a in (I, J, L))
    centroids = np.column_stack([(I + 0.5) * dx, (J + 0.5) * dy, (L + 0.5) * dz])[:, :dim]
    volumes = np.full(n, dx * dy * dz)

    active = poro * volumes >= pv_threshold
    if pv_threshold <= 0.0:
        active[:] = True
    index = np.full(n, -1, dtype=np.int64)
    index[active] = np.arange(int(active.sum()))

    cells_k, cells_l, areas, fcent, normals = [], [], [], [], []
    flat = np.arange(n).reshape(nz, ny, nx)
    directions = [
        (flat[:, :, :-1], flat[:, :, 1:], dy * dz, np.array([1.0, 0.0, 0.0]), np.array([dx / 2, 0, 0])),
        (flat[:, :-1, :], flat[:, 1:, :], dx * dz, np.array([0.0, 1.0, 0.0]), np.array([0, dy / 2, 0])),
        (flat[:-1, :, :], flat[1:, :, :], dx * dy, np.array([0.0, 0.0, 1.0]), np.array([0, 0, dz / 2])),
    ]
    full_cent = np.column_stack([(I + 0.5) * dx, (J + 0.5) * dy, (L + 0.5) * dz])
    for a, b, area, normal, offset in directions[:dim]:
        a = a.ravel()
        b = b.ravel()
        keep = active[a] & active[b]
        a, b = a[keep], b[keep]
        cells_k.append(index[a])
        cells_l.append(index[b])
        areas.append(np.full(len(a), area))
        fcent.append((full_cent[a] + offset)[:, :dim])
        normals.append(np.tile(normal[:dim], (len(a), 1)))
    face_cells = np.column_stack([np.concatenate(cells_k), np.concatenate(cells_l)])
    order = np.lexsort((face_cells[:, 1], face_cells[:, 0]))
    return Mesh(
        volumes=volumes[active],
        centroids=centroids[active],
        permeability=tensors[active],
        porosity=poro[active],
        face_cells=face_cells[order],
        face_areas=np.concatenate(areas)[order],
        face_centroids=np.concatenate(fcent)[order],
        face_normals=np.concatenate(normals)[order],
        shape=(nx, ny, nz),
        active_index=index,
    )


def cell_connectivity_graph(mesh: Mesh, excluded_cells: Sequence[int] = ()) -> CellGraph:
    """Graph over non-excluded cells with one edge per face joining two of them."""
    excluded = np.zeros(mesh.n_cells, dtype=bool)
    excluded[np.asarray(list(excluded_cells), dtype=np.int64)] = True
    vertices = np.flatnonzero(~excluded)
    local = np.full(mesh.n_cells, -1, dtype=np.int64)
    local[vertices] = np.arange(len(vertices))
    fc = mesh.face_cells
    keep = ~excluded[fc[:, 0]] & ~excluded[fc[:, 1]]
    return graph_from_edges(len(vertices), local[fc[keep]], vertices)


# ---------------------------------------------------------------------------
# Text formats


def write_mesh(mesh: Mesh, path) -> None:
    """Write ``mesh`` in the whitespace-separated text format (see :func:`read_mesh`)."""
    d = mesh.dimension
    with open(path, "w") as fh:
        fh.write(f"cells {mesh.n_cells} faces {mesh.n_faces} dim {d}\n")
        tri = upper_triangle(mesh.permeability)
        for i in range(mesh.n_cells):
            vals = [mesh.volumes[i], *mesh.centroids[i], *tri[i], mesh.porosity[i]]
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")
        for i, (k, l) in enumerate(mesh.face_cells):
            vals = [mesh.face_areas[i], *mesh.face_centroids[i], *mesh.face_normals[i]]
            fh.write(f"{k} {l} " + " ".join(repr(float(v)) for v in vals) + "\n")


def read_mesh(path) -> Mesh:
    """Read a mesh file.

    Format: a header ``cells N faces M dim d``; then ``N`` lines
    ``volume centroid[d] perm_upper_triangle[d(d+1)/2] porosity``; then ``M``
    lines ``K L area centroid[d] normal[d]``.  Faces with ``K > L`` are
    reoriented on read.
    """
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    head = lines[0]
    if len(head) != 6 or head[0] != "cells" or head[2] != "faces" or head[4] != "dim":
        raise MeshError("bad mesh header; expected 'cells N faces M dim d'")
    n, m, d = int(head[1]), int(head[3]), int(head[5])
    nt = d * (d + 1) // 2
    if len(lines) != 1 + n + m:
        raise MeshError(f"expected {n} cell and {m} face records, found {len(lines) - 1} lines")
    cell = np.array([[float(v) for v in ln] for ln in lines[1:1 + n]]).reshape(n, 1 + d + nt + 1)
    faces = lines[1 + n:]
    fc = np.array([[int(ln[0]), int(ln[1])] for ln in faces], dtype=np.int64).reshape(m, 2)
    fv = np.array([[float(v) for v in ln[2:]] for ln in faces]).reshape(m, 1 + 2 * d)
    normals = fv[:, 1 + d:]
    flip = fc[:, 0] > fc[:, 1]
    fc[flip] = fc[flip][:, ::-1]
    normals[flip] *= -1.0
    return Mesh(
        volumes=cell[:, 0],
        centroids=cell[:, 1:1 + d],
        permeability=_from_upper_triangle(cell[:, 1 + d:1 + d + nt], d),
        porosity=cell[:, -1],
        face_cells=fc,
        face_areas=fv[:, 0],
        face_centroids=fv[:, 1:1 + d],
        face_normals=normals,
    )


def read_cell_csv(path, n_cells: int | None = None) -> np.ndarray:
    """Per-cell CSV: one row per cell, numeric columns.  A text header row is skipped."""
    with open(path) as fh:
        first = fh.readline()
    skip = 0
    try:
        [float(v) for v in first.replace(",", " ").split()]
    except ValueError:
        skip = 1
    data = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    if n_cells is not None and len(data) != n_cells:
        raise MeshError(f"CSV has {len(data)} rows, expected {n_cells}")
    return data


def read_spe10_ascii(path, n_cells: int) -> tuple[np.ndarray, np.ndarray]:
    """SPE10-style flat listing: ``n`` values of kx, then ky, then kz, then porosity.

    A file with only ``3 n`` values is treated as permeability only (porosity
    returned as ``None``).
    """
    values = np.array(open(path).read().split(), dtype=float)
    if len(values) == 4 * n_cells:
        perm = values[:3 * n_cells].reshape(3, n_cells).T
        poro = values[3 * n_cells:]
    elif len(values) == 3 * n_cells:
        perm = values.reshape(3, n_cells).T
        poro = None
    else:
        raise MeshError(f"expected {3 * n_cells} or {4 * n_cells} values, found {len(values)}")
    return perm, poro
