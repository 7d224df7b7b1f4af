"""Contiguous cell aggregation on a cell-connectivity graph.

The partitioner is a seeded region-growing scheme: seeds are placed by
farthest-point sampling in the graph metric, then all parts grow
simultaneously by breadth-first search, always extending the currently
smallest part.  Every part is therefore connected; the result is post-checked
anyway, and disconnected aggregates (possible with ingested partitions) are
split into their connected components.
"""

from __future__ import annotations

import heapq
from collections import deque

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .grid import CellGraph


class PartitionError(ValueError):
    pass


def _farthest_point_seeds(adj: sp.csr_matrix, k: int, rng: np.random.Generator) -> list[int]:
    n = adj.shape[0]
    start = int(rng.integers(n))
    d = csgraph.shortest_path(adj, unweighted=True, indices=[start])[0]
    seeds = [int(np.argmax(d))]
    dist = csgraph.shortest_path(adj, unweighted=True, indices=[seeds[0]])[0]
    while len(seeds) < k:
        nxt = int(np.argmax(dist))
        if dist[nxt] == 0:
            break
        seeds.append(nxt)
        dist = np.minimum(dist, csgraph.shortest_path(adj, unweighted=True, indices=[nxt])[0])
    return seeds


def _grow(adj: sp.csr_matrix, seeds: list[int]) -> np.ndarray:
    n = adj.shape[0]
    part = np.full(n, -1, dtype=np.int64)
    frontier = []
    heap = []
    for j, v in enumerate(seeds):
        part[v] = j
        frontier.append(deque(adj.indices[adj.indptr[v]:adj.indptr[v + 1]]))
        heap.append((1, j))
    heapq.heapify(heap)
    size = [1] * len(seeds)
    while heap:
        _, j = heapq.heappop(heap)
        q = frontier[j]
        while q and part[q[0]] >= 0:
            q.popleft()
        if not q:
            continue
        v = q.popleft()
        part[v] = j
        size[j] += 1
        q.extend(u for u in adj.indices[adj.indptr[v]:adj.indptr[v + 1]] if part[u] < 0)
        heapq.heappush(heap, (size[j], j))
    return part


def split_disconnected(adj: sp.csr_matrix, part: np.ndarray) -> np.ndarray:
    """Relabel so that every part induces a connected subgraph."""
    coo = adj.tocoo()
    same = part[coo.row] == part[coo.col]
    inner = sp.csr_matrix((np.ones(int(same.sum())), (coo.row[same], coo.col[same])), shape=adj.shape)
    _, labels = csgraph.connected_components(inner, directed=False)
    return labels


def canonical_labels(part: np.ndarray) -> np.ndarray:
    """Renumber parts in order of their smallest member."""
    first = {}
    for v, a in enumerate(part):
        first.setdefault(int(a), v)
    order = sorted(first, key=first.get)
    remap = {a: i for i, a in enumerate(order)}
    return np.array([remap[int(a)] for a in part], dtype=np.int64)


def partition_graph(graph: CellGraph, target_factor: float, singletons=(), seed: int = 0) -> np.ndarray:
    """Aggregate the vertices of ``graph``; returns a vertex -> aggregate map.

    ``singletons`` (vertex indices) become one-vertex aggregates and are
    removed from the graph before partitioning.  Each remaining connected
    component receives ``max(1, round(size / target_factor))`` aggregates.
    """
    if target_factor < 2:
        raise PartitionError("coarsening factor must be >= 2")
    n = graph.n_vertices
    single = np.zeros(n, dtype=bool)
    single[np.asarray(list(singletons), dtype=np.int64)] = True
    rest = np.flatnonzero(~single)
    if target_factor > len(rest):
        raise PartitionError(
            f"coarsening factor {target_factor} exceeds the {len(rest)} partitionable cells")
    rng = np.random.default_rng(seed)
    part = np.full(n, -1, dtype=np.int64)
    adj = graph.adjacency[rest][:, rest].tocsr()
    ncomp, comp = csgraph.connected_components(adj, directed=False)
    next_label = 0
    for c in range(ncomp):
        members = np.flatnonzero(comp == c)
        sub = adj[members][:, members].tocsr()
        k = max(1, int(round(len(members) / target_factor)))
        local = _grow(sub, _farthest_point_seeds(sub, k, rng)) if k > 1 else np.zeros(len(members), np.int64)
        part[rest[members]] = local + next_label
        next_label += int(local.max()) + 1
    for v in np.flatnonzero(single):
        part[v] = next_label
        next_label += 1
    part = split_disconnected(graph.adjacency, part)
    return canonical_labels(part)


def is_contiguous(graph: CellGraph, part: np.ndarray) -> bool:
    relabeled = split_disconnected(graph.adjacency, np.asarray(part))
    return len(np.unique(relabeled)) == len(np.unique(part))


def read_partition(path, n_cells: int | None = None) -> np.ndarray:
    """Partition file: one ``cell_index aggregate_index`` line per cell."""
    data = np.loadtxt(path, dtype=np.int64, ndmin=2)
    if data.shape[1] != 2:
        raise PartitionError("partition lines must be 'cell_index aggregate_index'")
    n = int(data[:, 0].max()) + 1 if n_cells is None else n_cells
    part = np.full(n, -1, dtype=np.int64)
    part[data[:, 0]] = data[:, 1]
    if np.any(part < 0):
        raise PartitionError("partition file does not cover every cell")
    return part


def write_partition(path, part) -> None:
    with open(path, "w") as fh:
        for i, a in enumerate(part):
            fh.write(f"{i} {int(a)}\n")
