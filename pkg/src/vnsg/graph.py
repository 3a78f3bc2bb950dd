"""Adjacency matrix construction: distance-based, all-ones virtual
baseline, adaptive, and semi-adaptive variants, plus graph statistics
and CSV serialization.

The adaptive matrix is ReLU(E1*E2^T - E2*E1^T) with entries below a
threshold pruned to zero; thresholding keeps retained entries on the
gradient path and makes pruned entries gradient-dead.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .tensor import Tensor

KINDS = ("distance", "all_ones", "adaptive", "semi_adaptive")


@dataclass
class RoadGraph:
    """Sensor locations and pairwise road distances."""

    node_ids: list
    coords: list  # (lat, lon) degrees per node
    distances: list  # (i, j, d_ij) with d_ij in meters
    num_nodes: int

    def validate(self):
        if len(self.node_ids) != self.num_nodes or len(self.coords) != self.num_nodes:
            raise DataError("node_ids/coords length does not match num_nodes")
        for i, j, d in self.distances:
            if i == j:
                raise DataError(f"self-distance at node {i}")
            if d <= 0:
                raise DataError(f"non-positive distance {d} between {i} and {j}")
            if not (0 <= i < self.num_nodes and 0 <= j < self.num_nodes):
                raise DataError(f"distance index ({i},{j}) out of range")
        return self


@dataclass
class AdjacencyMatrix:
    """Square non-negative weight matrix over real (and virtual) nodes."""

    weights: np.ndarray
    n_real: int
    n_virtual: int
    kind: str
    learnable_mask: np.ndarray = None
    normalized: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = self.n_real + self.n_virtual
        if self.weights.shape != (n, n):
            raise ShapeError(
                f"adjacency shape {self.weights.shape} vs expected ({n}, {n})"
            )
        if self.learnable_mask is None:
            self.learnable_mask = np.zeros((n, n), dtype=bool)
        if self.kind not in KINDS:
            raise DataError(f"unknown adjacency kind {self.kind!r}")

    @property
    def size(self) -> int:
        return self.n_real + self.n_virtual

    def real_block(self) -> np.ndarray:
        return self.weights[: self.n_real, : self.n_real]

    def real_to_virtual(self) -> np.ndarray:
        return self.weights[: self.n_real, self.n_real :]

    def virtual_to_real(self) -> np.ndarray:
        return self.weights[self.n_real :, : self.n_real]


@dataclass
class NodeEmbeddings:
    """The two learnable embedding matrices generating the adaptive adjacency."""

    e1: Tensor
    e2: Tensor
    dim: int
    threshold: float

    def __post_init__(self):
        if self.e1.shape != self.e2.shape:
            raise ShapeError(f"embedding shapes {self.e1.shape} vs {self.e2.shape}")
        if self.dim < 1:
            raise DataError("embedding dim must be >= 1")
        if self.threshold < 0:
            raise DataError("adaptive threshold must be >= 0")

    @property
    def num_nodes(self) -> int:
        return self.e1.shape[0]


def init_embeddings(num_nodes: int, dim: int, threshold: float, seed: int) -> NodeEmbeddings:
    """Uniform [-0.5, 0.5] / dim**0.25 initialization, seeded.

    The mild scale keeps a healthy fraction of the thresholded adaptive
    entries alive at initialization so embedding gradients can flow.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    scl = 1.0 / dim ** 0.25
    e1 = Tensor(rng.uniform(-0.5, 0.5, (num_nodes, dim)) * scl, requires_grad=True, name="e1")
    e2 = Tensor(rng.uniform(-0.5, 0.5, (num_nodes, dim)) * scl, requires_grad=True, name="e2")
    return NodeEmbeddings(e1, e2, dim, threshold)


def build_distance_adjacency(graph: RoadGraph, threshold: float = 0.1) -> AdjacencyMatrix:
    """Thresholded Gaussian kernel over road distances.

    weight(i,j) = exp(-d_ij^2 / sigma^2) kept when >= threshold, where
    sigma is the population standard deviation of all provided d_ij.
    The result is symmetric with a zero diagonal.
    """
    if not graph.distances:
        raise DataError("cannot build distance adjacency from an empty distance list")
    if not (0 <= threshold < 1):
        raise DataError(f"distance threshold must be in [0, 1), got {threshold}")
    ds = np.array([d for _, _, d in graph.distances], dtype=np.float64)
    sigma = float(ds.std())  # population form
    if sigma == 0.0:
        raise DataError("all distances are equal; Gaussian kernel width is zero")
    n = graph.num_nodes
    w = np.zeros((n, n))
    for i, j, d in graph.distances:
        v = math.exp(-(d * d) / (sigma * sigma))
        if v >= threshold:
            # symmetrize; if both directions are listed, keep the stronger link
            w[i, j] = max(w[i, j], v)
            w[j, i] = max(w[j, i], v)
    np.fill_diagonal(w, 0.0)
    return AdjacencyMatrix(
        w, n, 0, "distance", meta={"distance_threshold": threshold, "sigma": sigma}
    )


def build_all_ones_adjacency(dist: AdjacencyMatrix) -> AdjacencyMatrix:
    """Append a single virtual node with all connection weights set to one."""
    if dist.kind != "distance":
        raise DataError(f"all-ones baseline needs a distance matrix, got {dist.kind!r}")
    n = dist.n_real
    w = np.zeros((n + 1, n + 1))
    w[:n, :n] = dist.weights
    w[:n, n] = 1.0
    w[n, :n] = 1.0
    return AdjacencyMatrix(w, n, 1, "all_ones", meta=dict(dist.meta))


def adaptive_weights(emb: NodeEmbeddings) -> Tensor:
    """Differentiable thresholded ReLU(E1*E2^T - E2*E1^T).

    Entries surviving the threshold keep identity gradient; pruned
    entries are gradient-dead (hard prune).
    """
    raw = T.relu(T.sub(T.matmul(emb.e1, T.transpose(emb.e2)), T.matmul(emb.e2, T.transpose(emb.e1))))
    keep = (raw.data >= emb.threshold) & (raw.data > 0)
    return T.mul(raw, Tensor(keep.astype(np.float64)))


def build_adaptive_adjacency(emb: NodeEmbeddings, n_virtual: int = 0) -> AdjacencyMatrix:
    """Snapshot the adaptive adjacency for the current embedding values."""
    n = emb.num_nodes
    if not (0 <= n_virtual <= n):
        raise DataError(f"n_virtual {n_virtual} out of range for {n} embedding rows")
    w = adaptive_weights(emb).data
    mask = np.ones((n, n), dtype=bool)
    return AdjacencyMatrix(
        w, n - n_virtual, n_virtual, "adaptive", learnable_mask=mask,
        meta={"adaptive_threshold": emb.threshold, "embedding_dim": emb.dim},
    )


def semi_adaptive_weights(dist_block: np.ndarray, emb: NodeEmbeddings) -> Tensor:
    """Differentiable semi-adaptive matrix: fixed distance-based
    real-real block, adaptive virtual-node blocks."""
    n_real = dist_block.shape[0]
    n = emb.num_nodes
    if n <= n_real:
        raise ShapeError(
            f"embedding rows {n} must exceed real node count {n_real} by n_virtual >= 1"
        )
    adapt = adaptive_weights(emb)
    virtual_mask = np.ones((n, n))
    virtual_mask[:n_real, :n_real] = 0.0
    fixed = np.zeros((n, n))
    fixed[:n_real, :n_real] = dist_block
    return T.add(T.mul(adapt, Tensor(virtual_mask)), Tensor(fixed))


def build_semi_adaptive_adjacency(dist: AdjacencyMatrix, emb: NodeEmbeddings) -> AdjacencyMatrix:
    if dist.kind != "distance":
        raise DataError(f"semi-adaptive needs a distance matrix, got {dist.kind!r}")
    n_real = dist.n_real
    n = emb.num_nodes
    if n <= n_real:
        raise ShapeError(
            f"embedding rows {n} inconsistent with distance size {n_real} (need n_virtual >= 1)"
        )
    w = semi_adaptive_weights(dist.weights, emb).data
    mask = np.ones((n, n), dtype=bool)
    mask[:n_real, :n_real] = False
    return AdjacencyMatrix(
        w, n_real, n - n_real, "semi_adaptive", learnable_mask=mask,
        meta={**dist.meta, "adaptive_threshold": emb.threshold, "embedding_dim": emb.dim},
    )


def propagation_tensor(weights: Tensor, raw: bool = False) -> Tensor:
    """Self-loops plus row normalization (default), or the raw matrix."""
    if raw:
        return weights
    eye = Tensor(np.eye(weights.shape[0]))
    return T.row_normalize(T.add(weights, eye))


def normalize_for_propagation(a: AdjacencyMatrix, raw: bool = False) -> AdjacencyMatrix:
    """Numeric counterpart of propagation_tensor for fixed matrices."""
    w = propagation_tensor(Tensor(a.weights), raw=raw).data
    return AdjacencyMatrix(
        w, a.n_real, a.n_virtual, a.kind, learnable_mask=a.learnable_mask.copy(),
        normalized=not raw, meta={**a.meta, "normalized": not raw},
    )


@dataclass
class GraphStats:
    nonzero_edges: int
    mean_degree: float
    density: float


def graph_stats(a: AdjacencyMatrix) -> GraphStats:
    """Edge count, mean degree, and density over the real-node block."""
    block = a.real_block()
    off = block.copy()
    np.fill_diagonal(off, 0.0)
    nnz = int(np.count_nonzero(off))
    n = a.n_real
    density = nnz / (n * (n - 1)) if n > 1 else 0.0
    return GraphStats(nnz, nnz / n if n else 0.0, density)


def bfs_hops(weights: np.ndarray) -> np.ndarray:
    """All-pairs hop distances on the unweighted graph of nonzero entries.

    Edges are treated as undirected; unreachable pairs get -1.
    """
    n = weights.shape[0]
    conn = (weights != 0) | (weights.T != 0)
    np.fill_diagonal(conn, False)
    neighbors = [np.flatnonzero(conn[i]) for i in range(n)]
    hops = np.full((n, n), -1, dtype=np.int64)
    for s in range(n):
        hops[s, s] = 0
        frontier = [s]
        d = 0
        while frontier:
            d += 1
            nxt = []
            for u in frontier:
                for v in neighbors[u]:
                    if hops[s, v] < 0:
                        hops[s, v] = d
                        nxt.append(v)
            frontier = nxt
    return hops


# -- CSV serialization ------------------------------------------------

def save_adjacency_csv(a: AdjacencyMatrix, path):
    header = {
        "kind": a.kind,
        "n_real": a.n_real,
        "n_virtual": a.n_virtual,
        "normalized": a.normalized,
        **{k: v for k, v in a.meta.items() if isinstance(v, (int, float, str, bool))},
    }
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(header) + "\n")
        writer = csv.writer(fh)
        for row in a.weights:
            writer.writerow([repr(float(v)) for v in row])


def load_adjacency_csv(path) -> AdjacencyMatrix:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise DataError(f"{path}: missing JSON header comment")
        header = json.loads(first[2:])
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    w = np.array(rows, dtype=np.float64)
    n_real, n_virtual = int(header["n_real"]), int(header["n_virtual"])
    mask = np.zeros_like(w, dtype=bool)
    kind = header["kind"]
    if kind == "adaptive":
        mask[:, :] = True
    elif kind == "semi_adaptive":
        mask[:, :] = True
        mask[:n_real, :n_real] = False
    return AdjacencyMatrix(
        w, n_real, n_virtual, kind, learnable_mask=mask,
        normalized=bool(header.get("normalized", False)),
        meta={k: v for k, v in header.items()
              if k not in ("kind", "n_real", "n_virtual", "normalized")},
    )


def read_road_graph(meta_file, edge_file) -> RoadGraph:
    """Load node metadata (id,lat,lon) and edge list (from_id,to_id,distance_m)."""
    node_ids, coords = [], []
    with open(meta_file) as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "lat", "lon"} <= set(reader.fieldnames):
            raise DataError(f"{meta_file}: expected header id,lat,lon")
        for row in reader:
            node_ids.append(row["id"])
            coords.append((float(row["lat"]), float(row["lon"])))
    index = {nid: i for i, nid in enumerate(node_ids)}
    if len(index) != len(node_ids):
        raise DataError(f"{meta_file}: duplicate node ids")
    distances = []
    with open(edge_file) as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"from_id", "to_id", "distance_m"} <= set(reader.fieldnames):
            raise DataError(f"{edge_file}: expected header from_id,to_id,distance_m")
        for row in reader:
            if row["from_id"] not in index or row["to_id"] not in index:
                raise DataError(
                    f"{edge_file}: edge references unknown node "
                    f"{row['from_id']!r} or {row['to_id']!r}"
                )
            distances.append((index[row["from_id"]], index[row["to_id"]], float(row["distance_m"])))
    return RoadGraph(node_ids, coords, distances, len(node_ids)).validate()


def write_road_graph(graph: RoadGraph, meta_file, edge_file):
    with open(meta_file, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "lat", "lon"])
        for nid, (lat, lon) in zip(graph.node_ids, graph.coords):
            writer.writerow([nid, repr(lat), repr(lon)])
    with open(edge_file, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from_id", "to_id", "distance_m"])
        for i, j, d in graph.distances:
            writer.writerow([graph.node_ids[i], graph.node_ids[j], repr(d)])
