"""Spatial neighbourhood graphs.

A node's candidate neighbours are all other nodes within ``radius``
(inclusive). When there are more than ``max_neighbours`` candidates a subset
of that size is kept, either uniformly at random or by earliest position in a
maximin (min-max distance) ordering of all nodes. Neighbour lists are
directed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

STRATEGIES = ("random", "minmax")


@dataclass(frozen=True)
class NeighbourRule:
    radius: float = 0.2
    max_neighbours: int = 30
    strategy: str = "random"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.max_neighbours < 1:
            raise ValueError("max_neighbours must be at least 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")


@dataclass
class SpatialGraph:
    """CSR-style neighbour lists: node ``j`` has neighbours
    ``indices[indptr[j]:indptr[j+1]]`` at distances ``dist[...]``."""

    coords: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    dist: np.ndarray

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def n_edges(self) -> int:
        return len(self.indices)

    def neighbours(self, j: int) -> np.ndarray:
        return self.indices[self.indptr[j]:self.indptr[j + 1]]

    def distances(self, j: int) -> np.ndarray:
        return self.dist[self.indptr[j]:self.indptr[j + 1]]

    @property
    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), self.degree)


def maximin_order(S: np.ndarray) -> np.ndarray:
    """Greedy maximin ordering starting from the point nearest the centroid."""
    n = len(S)
    order = np.empty(n, dtype=np.int64)
    if n == 0:
        return order
    first = int(np.argmin(((S - S.mean(axis=0)) ** 2).sum(axis=1)))
    order[0] = first
    mind = np.sqrt(((S - S[first]) ** 2).sum(axis=1))
    mind[first] = -1.0
    for t in range(1, n):
        nxt = int(np.argmax(mind))
        order[t] = nxt
        d = np.sqrt(((S - S[nxt]) ** 2).sum(axis=1))
        np.minimum(mind, d, out=mind)
        mind[order[: t + 1]] = -1.0
    return order


def build_graph(S: np.ndarray, rule: NeighbourRule, rng: np.random.Generator | None = None) -> SpatialGraph:
    S = np.asarray(S, dtype=np.float64).reshape(-1, 2)
    n = len(S)
    if n < 1:
        raise ValueError("a graph needs at least one node")
    pairs = cKDTree(S).query_pairs(rule.radius, output_type="ndarray")
    rows = np.concatenate((pairs[:, 0], pairs[:, 1])).astype(np.int64)
    cols = np.concatenate((pairs[:, 1], pairs[:, 0])).astype(np.int64)
    d = np.sqrt(((S[rows] - S[cols]) ** 2).sum(axis=1))
    keep = d <= rule.radius
    rows, cols, d = rows[keep], cols[keep], d[keep]

    deg = np.bincount(rows, minlength=n)
    if deg.size and deg.max() > rule.max_neighbours:
        if rule.strategy == "random":
            if rng is None:
                raise ValueError("random neighbour subsampling needs an rng")
            key = rng.random(len(rows))
        else:
            rank = np.empty(n, dtype=np.int64)
            rank[maximin_order(S)] = np.arange(n)
            key = rank[cols].astype(np.float64)
        order = np.lexsort((key, rows))
        rows, cols, d = rows[order], cols[order], d[order]
        start = np.concatenate(([0], np.cumsum(deg)[:-1]))
        pos = np.arange(len(rows)) - start[rows]
        sel = pos < rule.max_neighbours
        rows, cols, d = rows[sel], cols[sel], d[sel]

    order = np.lexsort((cols, rows))
    rows, cols, d = rows[order], cols[order], d[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return SpatialGraph(S, indptr, cols, d)


def rescale_to_unit_square(S: np.ndarray) -> tuple[np.ndarray, float]:
    """Shift and scale ``S`` so its bounding box's longer side is [0, 1].

    Returns ``(S_rescaled, c)``; a range estimated on the rescaled
    coordinates maps back to the original units as ``c * rho``.
    """
    S = np.asarray(S, dtype=np.float64)
    if len(S) < 2:
        raise ValueError("need at least two points to rescale")
    lo = S.min(axis=0)
    c = float((S.max(axis=0) - lo).max())
    if c == 0.0:
        raise ValueError("all points coincide; no scale to normalise")
    return (S - lo) / c, c


@dataclass
class GraphBatch:
    """Disjoint union of graphs, with node/graph/dataset bookkeeping.

    ``graph_of_node`` maps nodes to graphs (replicates) and
    ``dataset_of_graph`` maps replicates to datasets, so a batch can hold
    several replicated datasets of differing sizes.
    """

    n_nodes: int
    rows: np.ndarray
    cols: np.ndarray
    dist: np.ndarray
    inv_degree: np.ndarray
    indptr: np.ndarray
    graph_of_node: np.ndarray
    dataset_of_graph: np.ndarray
    n_graphs: int
    n_datasets: int

    def adjacency(self, weights: np.ndarray) -> sparse.csr_matrix:
        """CSR matrix with the given per-edge weights on the batch's pattern."""
        return sparse.csr_matrix(
            (weights, self.cols, self.indptr), shape=(self.n_nodes, self.n_nodes)
        )

    def readout_matrix(self, dtype) -> sparse.csr_matrix:
        counts = np.bincount(self.graph_of_node, minlength=self.n_graphs)
        w = (1.0 / counts[self.graph_of_node]).astype(dtype)
        return sparse.csr_matrix(
            (w, (self.graph_of_node, np.arange(self.n_nodes))), shape=(self.n_graphs, self.n_nodes)
        )

    def set_matrix(self, dtype) -> sparse.csr_matrix:
        counts = np.bincount(self.dataset_of_graph, minlength=self.n_datasets)
        w = (1.0 / counts[self.dataset_of_graph]).astype(dtype)
        return sparse.csr_matrix(
            (w, (self.dataset_of_graph, np.arange(self.n_graphs))),
            shape=(self.n_datasets, self.n_graphs),
        )


def batch_graphs(graphs: list[SpatialGraph], dataset_of_graph=None) -> GraphBatch:
    if not graphs:
        raise ValueError("empty graph list")
    offsets = np.concatenate(([0], np.cumsum([g.n for g in graphs])))
    rows = np.concatenate([g.rows + o for g, o in zip(graphs, offsets)])
    cols = np.concatenate([g.indices + o for g, o in zip(graphs, offsets)])
    dist = np.concatenate([g.dist for g in graphs])
    deg = np.concatenate([g.degree for g in graphs])
    indptr = np.zeros(offsets[-1] + 1, dtype=np.int64)
    np.cumsum(deg, out=indptr[1:])
    with np.errstate(divide="ignore"):
        inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
    gon = np.repeat(np.arange(len(graphs)), [g.n for g in graphs])
    if dataset_of_graph is None:
        dataset_of_graph = np.zeros(len(graphs), dtype=np.int64)
    dataset_of_graph = np.asarray(dataset_of_graph, dtype=np.int64)
    return GraphBatch(
        n_nodes=int(offsets[-1]),
        rows=rows,
        cols=cols,
        dist=dist,
        inv_degree=inv,
        indptr=indptr,
        graph_of_node=gon,
        dataset_of_graph=dataset_of_graph,
        n_graphs=len(graphs),
        n_datasets=int(dataset_of_graph.max()) + 1,
    )
