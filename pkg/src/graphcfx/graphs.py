"""Undirected graphs with binary word features, plus the GCN propagation operator.

A :class:`Graph` is immutable after construction. Perturbed variants (edge
deletions, feature overrides) are expressed as :class:`GraphView` overlays so
the original data is never copied or mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

__all__ = [
    "Graph",
    "GraphView",
    "canonical_edge",
    "neighbors",
    "degrees",
    "feature_row",
    "feature_matrix",
    "dense_adjacency",
    "normalize_adjacency_matrix",
    "normalize_adjacency_backward",
    "normalized_adjacency",
    "khop_subgraph",
]


def canonical_edge(u: int, v: int) -> tuple[int, int]:
    """Store undirected edges as (min, max) pairs."""
    return (u, v) if u < v else (v, u)


class Graph:
    """Undirected node-classified graph with binary word features.

    Parameters
    ----------
    node_count : int
    edges : iterable of (u, v) pairs, no self-loops; stored as a frozenset
        of (min, max) tuples
    features : (node_count, feature_dim) array with entries in {0, 1}
    labels : (node_count,) integer class ids
    vocabulary : one distinct word per feature column
    class_names : one distinct name per class id
    """

    __slots__ = ("node_count", "edges", "features", "labels", "vocabulary",
                 "class_names", "_adj_cache", "_deg_cache")

    def __init__(self, node_count, edges, features, labels, vocabulary, class_names):
        edges = frozenset(canonical_edge(int(u), int(v)) for u, v in edges)
        features = np.ascontiguousarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        vocabulary = tuple(vocabulary)
        class_names = tuple(class_names)

        if node_count < 0:
            raise ValueError("node_count must be non-negative")
        for u, v in edges:
            if u == v:
                raise ValueError(f"self-loop on node {u}")
            if not (0 <= u < node_count and 0 <= v < node_count):
                raise ValueError(f"edge ({u}, {v}) endpoint out of range")
        if features.shape != (node_count, len(vocabulary)):
            raise ValueError(
                f"features shape {features.shape} != ({node_count}, {len(vocabulary)})"
            )
        if features.size and not np.isin(features, (0.0, 1.0)).all():
            raise ValueError("features entries must be 0 or 1")
        if labels.shape != (node_count,):
            raise ValueError("labels must have one entry per node")
        if len(set(vocabulary)) != len(vocabulary):
            raise ValueError("vocabulary words must be distinct")
        if len(set(class_names)) != len(class_names):
            raise ValueError("class names must be distinct")
        if node_count and not ((0 <= labels).all() and (labels < len(class_names)).all()):
            raise ValueError("labels out of range for class_names")

        features.setflags(write=False)
        labels.setflags(write=False)
        self.node_count = int(node_count)
        self.edges = edges
        self.features = features
        self.labels = labels
        self.vocabulary = vocabulary
        self.class_names = class_names
        self._adj_cache = None
        self._deg_cache = None

    def __repr__(self):
        return (f"Graph(nodes={self.node_count}, edges={len(self.edges)}, "
                f"feature_dim={self.feature_dim}, classes={self.class_count})")

    @property
    def feature_dim(self) -> int:
        return len(self.vocabulary)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def _adjacency_sets(self):
        if self._adj_cache is None:
            cache = [set() for _ in range(self.node_count)]
            for u, v in self.edges:
                cache[u].add(v)
                cache[v].add(u)
            self._adj_cache = cache
        return self._adj_cache


@dataclass(frozen=True)
class GraphView:
    """Overlay on a base graph: deleted edges and/or per-node feature rows."""

    base: Graph
    deleted_edges: frozenset = frozenset()
    feature_overrides: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        deleted = frozenset(canonical_edge(int(u), int(v)) for u, v in self.deleted_edges)
        if not deleted <= self.base.edges:
            extra = deleted - self.base.edges
            raise ValueError(f"deleted edges not in base graph: {sorted(extra)}")
        overrides = {}
        for v, row in dict(self.feature_overrides).items():
            row = np.asarray(row, dtype=np.float64)
            if row.shape != (self.base.feature_dim,):
                raise ValueError(f"override for node {v} must have length {self.base.feature_dim}")
            if row.size and not np.isin(row, (0.0, 1.0)).all():
                raise ValueError("feature override entries must be 0 or 1")
            row.setflags(write=False)
            overrides[int(v)] = row
        object.__setattr__(self, "deleted_edges", deleted)
        object.__setattr__(self, "feature_overrides", overrides)

    @property
    def node_count(self) -> int:
        return self.base.node_count

    @property
    def feature_dim(self) -> int:
        return self.base.feature_dim

    @property
    def labels(self) -> np.ndarray:
        return self.base.labels

    @property
    def vocabulary(self) -> tuple:
        return self.base.vocabulary

    @property
    def class_names(self) -> tuple:
        return self.base.class_names


def _check_node(g, v: int):
    if not 0 <= v < g.node_count:
        raise IndexError(f"node id {v} out of range for {g.node_count} nodes")


def neighbors(g: Graph | GraphView, v: int) -> set:
    """Set of nodes sharing an edge with v, after any view deletions."""
    _check_node(g, v)
    if isinstance(g, GraphView):
        out = set(g.base._adjacency_sets()[v])
        for a, b in g.deleted_edges:
            if a == v:
                out.discard(b)
            elif b == v:
                out.discard(a)
        return out
    return set(g._adjacency_sets()[v])


def degrees(g: Graph | GraphView) -> np.ndarray:
    """Per-node degree vector (deletions applied, no self-loops)."""
    if isinstance(g, GraphView):
        deg = degrees(g.base).copy()
        for u, v in g.deleted_edges:
            deg[u] -= 1
            deg[v] -= 1
        return deg
    if g._deg_cache is None:
        deg = np.zeros(g.node_count, dtype=np.int64)
        for u, v in g.edges:
            deg[u] += 1
            deg[v] += 1
        deg.setflags(write=False)
        g._deg_cache = deg
    return g._deg_cache


def feature_row(g: Graph | GraphView, v: int) -> np.ndarray:
    """Node v's binary feature row with any view override applied."""
    _check_node(g, v)
    if isinstance(g, GraphView):
        row = g.feature_overrides.get(v)
        if row is not None:
            return row
        return g.base.features[v]
    return g.features[v]


def feature_matrix(g: Graph | GraphView) -> np.ndarray:
    """Full (n, d) feature matrix with overrides applied (copies only if needed)."""
    if isinstance(g, GraphView):
        if not g.feature_overrides:
            return g.base.features
        x = g.base.features.copy()
        for v, row in g.feature_overrides.items():
            x[v] = row
        return x
    return g.features


def dense_adjacency(g: Graph | GraphView) -> np.ndarray:
    """Symmetric 0/1 adjacency matrix with deletions applied, zero diagonal."""
    base = g.base if isinstance(g, GraphView) else g
    a = np.zeros((base.node_count, base.node_count), dtype=np.float64)
    for u, v in base.edges:
        a[u, v] = a[v, u] = 1.0
    if isinstance(g, GraphView):
        for u, v in g.deleted_edges:
            a[u, v] = a[v, u] = 0.0
    return a


def normalize_adjacency_matrix(a: np.ndarray) -> np.ndarray:
    """Symmetrically normalized adjacency with self-loops.

    Returns D̃^{-1/2} (A + I) D̃^{-1/2} where D̃ is the row-sum diagonal of
    A + I. Entries of `a` may be fractional (relaxed masks); the diagonal of
    `a` must be zero. A degree-0 row reduces to a lone self-loop entry of 1.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    m = a + np.eye(n)
    d = m.sum(axis=1)
    s = 1.0 / np.sqrt(d)
    return m * np.outer(s, s)


def normalize_adjacency_backward(a: np.ndarray, grad_ahat: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss through :func:`normalize_adjacency_matrix`.

    Given dL/dÂ, returns dL/dA treating every off-diagonal entry of `a` as an
    independent variable (the degree dependence is included). Callers with
    symmetric tied entries sum the (i, j) and (j, i) components themselves.
    """
    a = np.asarray(a, dtype=np.float64)
    g = np.asarray(grad_ahat, dtype=np.float64)
    n = a.shape[0]
    m = a + np.eye(n)
    d = m.sum(axis=1)
    s = 1.0 / np.sqrt(d)

    # Direct entry term: Â_ij = s_i s_j M_ij.
    grad_a = g * np.outer(s, s)
    np.fill_diagonal(grad_a, 0.0)

    # Degree term: d_i feeds every Â_i* and Â_*i through s_i.
    grad_s = ((g + g.T) * m * s[None, :]).sum(axis=1)
    grad_d = grad_s * (-0.5) * d ** (-1.5)
    grad_a += grad_d[:, None]
    np.fill_diagonal(grad_a, 0.0)
    return grad_a


def normalized_adjacency(g: Graph | GraphView) -> np.ndarray:
    """The propagation operator Â = D̃^{-1/2}(A + I)D̃^{-1/2} for a graph or view."""
    if g.node_count < 1:
        raise ValueError("normalized adjacency needs at least one node")
    return normalize_adjacency_matrix(dense_adjacency(g))


def khop_subgraph(g: Graph, v: int, k: int) -> tuple[Graph, np.ndarray]:
    """Induced subgraph on all nodes within hop distance k of v.

    Returns ``(sub, node_ids)`` where ``node_ids[local] = original id`` and
    the mapping is ascending in original id. ``sub`` keeps features, labels,
    vocabulary and class names; the target's local id is
    ``int(np.searchsorted(node_ids, v))``.
    """
    _check_node(g, v)
    if k < 1:
        raise ValueError("k must be positive")
    adj = g._adjacency_sets()
    seen = {v}
    frontier = [v]
    for _ in range(k):
        nxt = []
        for u in frontier:
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    nxt.append(w)
        frontier = nxt
    node_ids = np.array(sorted(seen), dtype=np.int64)
    local = {orig: i for i, orig in enumerate(node_ids)}
    sub_edges = [
        (local[a], local[b])
        for a, b in g.edges
        if a in local and b in local
    ]
    sub = Graph(
        node_count=len(node_ids),
        edges=sub_edges,
        features=g.features[node_ids],
        labels=g.labels[node_ids],
        vocabulary=g.vocabulary,
        class_names=g.class_names,
    )
    return sub, node_ids
