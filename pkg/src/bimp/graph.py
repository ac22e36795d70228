"""Undirected simple graphs, SBM generators, batching and a text file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .autodiff import Segments


class GraphError(ValueError):
    pass


class EndpointError(GraphError):
    pass


class SelfLoopError(GraphError):
    pass


class DuplicateEdgeError(GraphError):
    pass


class FeatureShapeError(GraphError):
    pass


class GraphFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(eq=False)
class Graph:
    """An undirected simple graph.

    ``edges`` holds each undirected edge once as ``(u, v)`` with ``u < v``,
    sorted lexicographically. Per-edge arrays (features, labels) follow that
    order. Use :func:`build_graph` rather than the constructor.
    """

    num_nodes: int
    edges: np.ndarray
    node_features: np.ndarray
    edge_features: np.ndarray | None = None
    node_labels: np.ndarray | None = None
    edge_labels: np.ndarray | None = None
    graph_target: float | None = None
    degree: np.ndarray = field(init=False)

    def __post_init__(self):
        self.degree = np.bincount(self.edges.reshape(-1), minlength=self.num_nodes).astype(np.int64)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def directed(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(src, dst, undirected_edge_id) of the directed expansion, sorted by (dst, src)."""
        u, v = self.edges[:, 0], self.edges[:, 1]
        src = np.concatenate([u, v])
        dst = np.concatenate([v, u])
        eid = np.concatenate([np.arange(len(u)), np.arange(len(u))])
        order = np.lexsort((src, dst))
        return src[order], dst[order], eid[order]

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        a[self.edges[:, 0], self.edges[:, 1]] = 1.0
        a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and _arr_eq(self.edges, other.edges)
            and _arr_eq(self.node_features, other.node_features)
            and _arr_eq(self.edge_features, other.edge_features)
            and _arr_eq(self.node_labels, other.node_labels)
            and _arr_eq(self.edge_labels, other.edge_labels)
            and self.graph_target == other.graph_target
        )


def _arr_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and a.dtype.kind == b.dtype.kind and np.array_equal(a, b)


def build_graph(
    num_nodes: int,
    edges: Iterable[Sequence[int]],
    node_features=None,
    edge_features=None,
    node_labels=None,
    edge_labels=None,
    graph_target: float | None = None,
) -> Graph:
    """Validate raw fields and return a graph with a canonical edge list.

    Edges may be given in either orientation; ``(u, v)`` and ``(v, u)`` in the
    input count as the same undirected edge and are rejected as duplicates.
    Per-edge arrays are reordered alongside the canonical edge list.
    ``node_features`` defaults to a single constant column.
    """
    n = int(num_nodes)
    if n < 0:
        raise GraphError(f"negative node count {n}")
    e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    e = e.reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise EndpointError(f"edge endpoint outside [0, {n})")
    if np.any(e[:, 0] == e[:, 1]):
        raise SelfLoopError("self-loop in edge list")
    canon = np.sort(e, axis=1)
    order = np.lexsort((canon[:, 1], canon[:, 0]))
    canon = canon[order]
    if len(canon) > 1 and np.any(np.all(canon[1:] == canon[:-1], axis=1)):
        raise DuplicateEdgeError("duplicate undirected edge")

    if node_features is None:
        x = np.ones((n, 1))
    else:
        x = np.array(node_features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(n, -1) if n else x.reshape(0, 0)
        if x.shape[0] != n:
            raise FeatureShapeError(f"{x.shape[0]} feature rows for {n} nodes")

    ef = None
    if edge_features is not None:
        ef = np.array(edge_features, dtype=np.float64)
        if ef.ndim == 1:
            ef = ef[:, None]
        if ef.shape[0] != len(e):
            raise FeatureShapeError(f"{ef.shape[0]} edge feature rows for {len(e)} edges")
        ef = ef[order]
    nl = None
    if node_labels is not None:
        nl = np.array(node_labels, dtype=np.int64)
        if nl.shape != (n,):
            raise FeatureShapeError(f"{nl.shape} node labels for {n} nodes")
    el = None
    if edge_labels is not None:
        el = np.array(edge_labels, dtype=np.int64)
        if el.shape != (len(e),):
            raise FeatureShapeError(f"{el.shape} edge labels for {len(e)} edges")
        el = el[order]
    target = None if graph_target is None else float(graph_target)
    return Graph(n, canon, x, ef, nl, el, target)


def neighbors(g: Graph, v: int) -> list[int]:
    if not 0 <= v < g.num_nodes:
        raise EndpointError(f"node {v} outside [0, {g.num_nodes})")
    e = g.edges
    nb = np.concatenate([e[e[:, 0] == v, 1], e[e[:, 1] == v, 0]])
    return sorted(int(u) for u in nb)


# ---------------------------------------------------------------------------
# batching


class GraphBatch:
    """Disjoint union of graphs with the index structures message passing needs.

    Directed edges are ordered by (destination, source) globally, which keeps
    per-destination groups contiguous.
    """

    def __init__(self, graphs: Sequence[Graph]):
        if not graphs:
            raise GraphError("empty batch")
        self.graphs = list(graphs)
        sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        self.node_offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.num_nodes = int(self.node_offsets[-1])
        self.num_graphs = len(graphs)

        src, dst, und, eg = [], [], [], []
        und_offsets = np.concatenate([[0], np.cumsum([g.num_edges for g in graphs])])
        for i, g in enumerate(graphs):
            s, d, eid = g.directed()
            off = self.node_offsets[i]
            src.append(s + off)
            dst.append(d + off)
            und.append(eid + und_offsets[i])
            eg.append(np.full(len(s), i, dtype=np.int64))
        self.src_index = np.concatenate(src).astype(np.int64)
        self.dst_index = np.concatenate(dst).astype(np.int64)
        self.undirected_id = np.concatenate(und).astype(np.int64)
        self.num_directed = len(self.src_index)
        self.undirected_offsets = und_offsets

        self.src = Segments(self.src_index, self.num_nodes)
        self.dst = Segments(self.dst_index, self.num_nodes)
        self.node_graph = Segments(np.repeat(np.arange(self.num_graphs), sizes), self.num_graphs)
        self.edge_graph = Segments(np.concatenate(eg).astype(np.int64), self.num_graphs)
        self.degree = np.bincount(self.dst_index, minlength=self.num_nodes).astype(np.float64)

        self.x = np.concatenate([g.node_features for g in graphs], axis=0)
        self._mean_op = None
        self._mean_op_t = None

    @property
    def inv_degree(self) -> np.ndarray:
        """1/deg with 0 for isolated nodes."""
        return np.divide(1.0, self.degree, out=np.zeros_like(self.degree), where=self.degree > 0)

    @property
    def mean_operator(self) -> sp.csr_matrix:
        """Row-normalised adjacency D^-1 A (zero rows for isolated nodes)."""
        if self._mean_op is None:
            indptr = np.concatenate([[0], np.cumsum(self.dst.counts)])
            vals = self.inv_degree[self.dst_index]
            self._mean_op = sp.csr_matrix(
                (vals, self.src_index, indptr), shape=(self.num_nodes, self.num_nodes))
        return self._mean_op

    @property
    def mean_operator_t(self) -> sp.csr_matrix:
        if self._mean_op_t is None:
            self._mean_op_t = self.mean_operator.T.tocsr()
        return self._mean_op_t

    def edge_features(self) -> np.ndarray | None:
        """Per-directed-edge input features, or None if any graph lacks them."""
        if any(g.edge_features is None for g in self.graphs):
            return None
        und = np.concatenate([g.edge_features for g in self.graphs], axis=0)
        return und[self.undirected_id]

    def node_labels(self) -> np.ndarray:
        return np.concatenate([g.node_labels for g in self.graphs])

    def edge_labels(self) -> np.ndarray:
        und = np.concatenate([g.edge_labels for g in self.graphs])
        return und[self.undirected_id]

    def graph_targets(self) -> np.ndarray:
        return np.array([g.graph_target for g in self.graphs])

    def node_slice(self, i: int) -> slice:
        return slice(int(self.node_offsets[i]), int(self.node_offsets[i + 1]))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SbmSpec:
    """Parameters of a planted-partition stochastic block model."""

    num_graphs: int = 1
    nodes_per_graph: tuple[int, int] = (60, 60)
    num_communities: int = 6
    p_in: float = 0.5
    p_out: float = 0.05
    corruption: float = 0.8

    def validate(self) -> None:
        lo, hi = self.nodes_per_graph
        if not 0.0 <= self.p_out <= self.p_in <= 1.0:
            raise GraphError(f"need 0 <= p_out <= p_in <= 1, got {self.p_out}, {self.p_in}")
        if not 0.0 <= self.corruption <= 1.0:
            raise GraphError(f"corruption rate {self.corruption} outside [0, 1]")
        if lo > hi or lo < 1:
            raise GraphError(f"bad node-count range {self.nodes_per_graph}")
        if self.num_communities < 1 or self.num_communities > lo:
            raise GraphError(f"{self.num_communities} communities cannot fit in {lo} nodes")
        if self.num_graphs < 0:
            raise GraphError("negative graph count")


def _sample_sbm(spec: SbmSpec, rng: np.random.Generator) -> Graph:
    lo, hi = spec.nodes_per_graph
    n = int(rng.integers(lo, hi + 1))
    c = spec.num_communities
    labels = rng.permutation(np.arange(n) % c)
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, spec.p_in, spec.p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    revealed = rng.permutation(n)[: int(round((1.0 - spec.corruption) * n))]
    x = np.zeros((n, c))
    x[revealed, labels[revealed]] = 1.0
    return build_graph(n, edges, node_features=x, node_labels=labels)


def generate_sbm(spec: SbmSpec, seed: int) -> list[Graph]:
    """Community-labelled SBM graphs with one-hot community hints on a
    ``1 - corruption`` fraction of nodes (zero rows elsewhere)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    return [_sample_sbm(spec, rng) for _ in range(spec.num_graphs)]


def intra_edge_fraction(g: Graph) -> float:
    lab = g.node_labels
    intra = np.sum(lab[g.edges[:, 0]] == lab[g.edges[:, 1]])
    return float(intra) / g.num_edges


def generate_regression_set(num_graphs: int, spec: SbmSpec, seed: int) -> list[Graph]:
    """SBM graphs whose target is the fraction of edges inside a community.

    Edgeless draws are discarded and resampled.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < num_graphs:
        g = _sample_sbm(spec, rng)
        if g.num_edges == 0:
            continue
        g.graph_target = intra_edge_fraction(g)
        out.append(g)
    return out


def split(graphs: Sequence[Graph], sizes: Sequence[int]) -> list[list[Graph]]:
    if sum(sizes) > len(graphs):
        raise GraphError(f"split sizes {list(sizes)} exceed {len(graphs)} graphs")
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [list(graphs[bounds[i]:bounds[i + 1]]) for i in range(len(sizes))]


# ---------------------------------------------------------------------------
# file format
#
# One JSON object per line with keys in this order:
#   n, edges, x, edge_x, y, edge_y, target
# Floats are written with repr-precision so a read/write round trip is exact.


def _graph_to_record(g: Graph) -> dict:
    return {
        "n": g.num_nodes,
        "edges": g.edges.tolist(),
        "x": g.node_features.tolist(),
        "edge_x": None if g.edge_features is None else g.edge_features.tolist(),
        "y": None if g.node_labels is None else g.node_labels.tolist(),
        "edge_y": None if g.edge_labels is None else g.edge_labels.tolist(),
        "target": g.graph_target,
    }


def _record_to_graph(rec: dict) -> Graph:
    n = int(rec["n"])
    x = np.array(rec["x"], dtype=np.float64)
    if x.ndim != 2:
        x = x.reshape(len(rec["x"]), -1) if len(rec["x"]) else np.zeros((0, 0))
    if x.shape[0] != n:
        raise FeatureShapeError(f"{x.shape[0]} feature rows for {n} nodes")
    return build_graph(
        n,
        np.array(rec["edges"], dtype=np.int64).reshape(-1, 2),
        node_features=x,
        edge_features=rec.get("edge_x"),
        node_labels=rec.get("y"),
        edge_labels=rec.get("edge_y"),
        graph_target=rec.get("target"),
    )


def write_graphs(path, graphs: Iterable[Graph]) -> None:
    with open(path, "w") as fh:
        for g in graphs:
            fh.write(json.dumps(_graph_to_record(g), separators=(",", ":")))
            fh.write("\n")


def read_graphs(path) -> list[Graph]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict) or "n" not in rec or "edges" not in rec or "x" not in rec:
                raise ValueError("record needs n, edges and x")
            out.append(_record_to_graph(rec))
        except (ValueError, KeyError, TypeError) as exc:
            raise GraphFormatError(lineno, str(exc)) from exc
    return out

