import json
import math

import numpy as np
import numpy.testing as npt
import pytest

from vnsg.errors import DataError, ShapeError
from vnsg.graph import (
    AdjacencyMatrix,
    NodeEmbeddings,
    RoadGraph,
    adaptive_weights,
    bfs_hops,
    build_adaptive_adjacency,
    build_all_ones_adjacency,
    build_distance_adjacency,
    build_semi_adaptive_adjacency,
    graph_stats,
    init_embeddings,
    load_adjacency_csv,
    normalize_for_propagation,
    read_road_graph,
    save_adjacency_csv,
    semi_adaptive_weights,
    write_road_graph,
)
from vnsg.tensor import Tensor, tsum


def oracle_distance_adjacency(n, distances, threshold):
    """Brute-force thresholded Gaussian kernel, independent of the library."""
    ds = [d for _, _, d in distances]
    mean = sum(ds) / len(ds)
    sigma = math.sqrt(sum((d - mean) ** 2 for d in ds) / len(ds))
    w = [[0.0] * n for _ in range(n)]
    for i, j, d in distances:
        v = math.exp(-(d ** 2) / sigma ** 2)
        if v >= threshold:
            w[i][j] = max(w[i][j], v)
            w[j][i] = max(w[j][i], v)
    for i in range(n):
        w[i][i] = 0.0
    return np.array(w)


def random_graph(rng, n=10, n_edges=20):
    pairs = set()
    while len(pairs) < n_edges:
        i, j = rng.integers(0, n, 2)
        if i != j:
            pairs.add((int(i), int(j)))
    distances = [(i, j, float(rng.uniform(100, 2000))) for i, j in pairs]
    coords = [(32.0 + 0.01 * k, -117.0 + 0.01 * k) for k in range(n)]
    return RoadGraph([f"n{k}" for k in range(n)], coords, distances, n)


class TestDistanceAdjacency:
    def test_edge_at_sigma(self):
        # distances {200, 600}: population sigma = 200, so the d=200 edge
        # carries weight exp(-1)
        graph = RoadGraph(
            ["a", "b", "c"], [(0, 0)] * 3, [(0, 1, 200.0), (1, 2, 600.0)], 3
        )
        adj = build_distance_adjacency(graph, threshold=0.3)
        npt.assert_allclose(adj.weights[0, 1], math.exp(-1.0), rtol=1e-12)
        npt.assert_allclose(adj.weights[1, 0], math.exp(-1.0), rtol=1e-12)

    def test_tiny_distance_weight_near_one(self):
        graph = RoadGraph(
            ["a", "b", "c"], [(0, 0)] * 3, [(0, 1, 1e-6), (1, 2, 500.0)], 3
        )
        adj = build_distance_adjacency(graph, threshold=0.0)
        assert adj.weights[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_empty_distance_list(self):
        graph = RoadGraph(["a"], [(0, 0)], [], 1)
        with pytest.raises(DataError, match="empty"):
            build_distance_adjacency(graph)

    def test_matches_oracle_on_random_graphs(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            graph = random_graph(rng)
            threshold = float(rng.uniform(0.0, 0.9))
            adj = build_distance_adjacency(graph, threshold)
            expected = oracle_distance_adjacency(10, graph.distances, threshold)
            npt.assert_allclose(adj.weights, expected, atol=1e-12)
            assert adj.kind == "distance"
            assert adj.n_virtual == 0
            npt.assert_array_equal(adj.weights, adj.weights.T)


class TestAllOnes:
    def setup_method(self):
        rng = np.random.default_rng(1)
        self.dist = build_distance_adjacency(random_graph(rng, n=3, n_edges=3), 0.0)

    def test_virtual_row_and_column(self):
        adj = build_all_ones_adjacency(self.dist)
        npt.assert_array_equal(adj.weights[3], [1.0, 1.0, 1.0, 0.0])
        npt.assert_array_equal(adj.weights[:, 3], [1.0, 1.0, 1.0, 0.0])

    def test_distance_block_bit_for_bit(self):
        adj = build_all_ones_adjacency(self.dist)
        npt.assert_array_equal(adj.real_block(), self.dist.weights)

    def test_single_virtual_node(self):
        adj = build_all_ones_adjacency(self.dist)
        assert adj.n_virtual == 1
        assert adj.kind == "all_ones"
        assert not adj.learnable_mask.any()

    def test_requires_distance_kind(self):
        adj = build_all_ones_adjacency(self.dist)
        with pytest.raises(DataError):
            build_all_ones_adjacency(adj)


class TestAdaptiveAdjacency:
    def test_equal_embeddings_give_zero(self):
        e = Tensor(np.random.default_rng(2).normal(size=(4, 3)), requires_grad=True)
        emb = NodeEmbeddings(e, Tensor(e.data.copy(), requires_grad=True), 3, 0.0)
        npt.assert_array_equal(adaptive_weights(emb).data, np.zeros((4, 4)))

    def test_hand_case(self):
        emb = NodeEmbeddings(
            Tensor([[1.0], [0.0]], requires_grad=True),
            Tensor([[0.0], [1.0]], requires_grad=True),
            1, 0.0,
        )
        npt.assert_array_equal(adaptive_weights(emb).data, [[0.0, 1.0], [0.0, 0.0]])

    def test_threshold_leaves_no_weak_entries(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            emb = init_embeddings(5, 3, threshold=0.5, seed=int(rng.integers(1 << 31)))
            w = adaptive_weights(emb).data
            nz = w[w > 0]
            assert (nz >= 0.5).all()

    def test_uni_directionality_property(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            n, d = int(rng.integers(2, 8)), int(rng.integers(1, 5))
            emb = NodeEmbeddings(
                Tensor(rng.normal(size=(n, d)), requires_grad=True),
                Tensor(rng.normal(size=(n, d)), requires_grad=True),
                d, float(rng.uniform(0, 0.3)),
            )
            w = adaptive_weights(emb).data
            assert np.all(w * w.T == 0.0)
            assert np.all(w >= 0.0)

    def test_retained_entries_carry_gradients(self):
        emb = init_embeddings(4, 3, threshold=0.0, seed=7)
        tsum(adaptive_weights(emb)).backward()
        assert emb.e1.grad is not None and np.abs(emb.e1.grad).sum() > 0
        assert emb.e2.grad is not None and np.abs(emb.e2.grad).sum() > 0

    def test_pruned_entries_are_gradient_dead(self):
        # a threshold above every produced weight prunes everything
        emb = init_embeddings(4, 3, threshold=1e9, seed=7)
        tsum(adaptive_weights(emb)).backward()
        npt.assert_array_equal(emb.e1.grad, np.zeros_like(emb.e1.data))
        npt.assert_array_equal(emb.e2.grad, np.zeros_like(emb.e2.data))


class TestSemiAdaptive:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.dist = build_distance_adjacency(random_graph(rng, n=3, n_edges=4), 0.0)

    def test_real_block_equals_distance(self):
        emb = init_embeddings(5, 4, threshold=0.0, seed=11)
        adj = build_semi_adaptive_adjacency(self.dist, emb)
        npt.assert_array_equal(adj.real_block(), self.dist.weights)
        assert not adj.learnable_mask[:3, :3].any()
        assert adj.learnable_mask[3:, :].all() and adj.learnable_mask[:, 3:].all()

    def test_equal_embeddings_disconnect_virtual_nodes(self):
        e = np.random.default_rng(6).normal(size=(5, 2))
        emb = NodeEmbeddings(Tensor(e, requires_grad=True),
                             Tensor(e.copy(), requires_grad=True), 2, 0.0)
        adj = build_semi_adaptive_adjacency(self.dist, emb)
        npt.assert_array_equal(adj.real_to_virtual(), np.zeros((3, 2)))
        npt.assert_array_equal(adj.virtual_to_real(), np.zeros((2, 3)))

    def test_blocks_match_full_adaptive_slices(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            emb = init_embeddings(5, 3, threshold=float(rng.uniform(0, 0.2)),
                                  seed=int(rng.integers(1 << 31)))
            adj = build_semi_adaptive_adjacency(self.dist, emb)
            full = adaptive_weights(emb).data  # independent 5x5 computation
            npt.assert_array_equal(adj.weights[:3, 3:5], full[:3, 3:5])
            npt.assert_array_equal(adj.weights[3:5, :3], full[3:5, :3])
            npt.assert_array_equal(adj.weights[3:5, 3:5], full[3:5, 3:5])

    def test_inconsistent_embedding_rows(self):
        emb = init_embeddings(3, 2, threshold=0.0, seed=1)
        with pytest.raises(ShapeError):
            build_semi_adaptive_adjacency(self.dist, emb)

    def test_real_block_gradient_free(self):
        emb = init_embeddings(5, 4, threshold=0.0, seed=11)
        out = semi_adaptive_weights(self.dist.weights, emb)
        tsum(out).backward()
        # gradient into embeddings only via virtual blocks: zeroing them
        # must zero the gradient entirely
        e = np.random.default_rng(8).normal(size=(5, 2))
        emb2 = NodeEmbeddings(Tensor(e, requires_grad=True),
                              Tensor(e.copy(), requires_grad=True), 2, 0.0)
        out2 = semi_adaptive_weights(self.dist.weights, emb2)
        npt.assert_array_equal(out2.data[:3, :3], self.dist.weights)


class TestNormalization:
    def test_zero_matrix_becomes_identity(self):
        adj = AdjacencyMatrix(np.zeros((2, 2)), 2, 0, "distance")
        out = normalize_for_propagation(adj)
        npt.assert_array_equal(out.weights, np.eye(2))

    def test_hand_case(self):
        adj = AdjacencyMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]), 2, 0, "distance")
        out = normalize_for_propagation(adj)
        npt.assert_allclose(out.weights, [[0.5, 0.5], [0.5, 0.5]])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            w = rng.uniform(0, 1, size=(6, 6))
            adj = AdjacencyMatrix(w, 6, 0, "distance")
            out = normalize_for_propagation(adj)
            npt.assert_allclose(out.weights.sum(axis=1), np.ones(6), atol=1e-12)

    def test_raw_mode_is_identity_transform(self):
        w = np.random.default_rng(10).uniform(0, 1, size=(4, 4))
        adj = AdjacencyMatrix(w, 4, 0, "distance")
        npt.assert_array_equal(normalize_for_propagation(adj, raw=True).weights, w)


class TestGraphStats:
    def test_complete_graph(self):
        w = np.ones((3, 3)) - np.eye(3)
        stats = graph_stats(AdjacencyMatrix(w, 3, 0, "distance"))
        assert stats.density == 1.0
        assert stats.mean_degree == 2.0

    def test_empty_graph(self):
        stats = graph_stats(AdjacencyMatrix(np.zeros((4, 4)), 4, 0, "distance"))
        assert stats.density == 0.0
        assert stats.nonzero_edges == 0

    def test_ignores_virtual_nodes(self):
        dist = AdjacencyMatrix(np.ones((2, 2)) - np.eye(2), 2, 0, "distance")
        augmented = build_all_ones_adjacency(dist)
        assert graph_stats(augmented).nonzero_edges == graph_stats(dist).nonzero_edges


class TestBfsHops:
    def test_chain(self):
        w = np.zeros((4, 4))
        for i in range(3):
            w[i, i + 1] = 1.0
        hops = bfs_hops(w)
        assert hops[0, 3] == 3 and hops[3, 0] == 3 and hops[1, 1] == 0

    def test_disconnected(self):
        hops = bfs_hops(np.zeros((3, 3)))
        assert hops[0, 1] == -1


class TestCsvRoundTrip:
    def test_adjacency_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        dist = build_distance_adjacency(random_graph(rng, n=4, n_edges=6), 0.1)
        emb = init_embeddings(6, 3, threshold=0.1, seed=3)
        adj = build_semi_adaptive_adjacency(dist, emb)
        path = tmp_path / "adj.csv"
        save_adjacency_csv(adj, path)
        loaded = load_adjacency_csv(path)
        npt.assert_array_equal(loaded.weights, adj.weights)
        assert loaded.kind == adj.kind
        assert loaded.n_real == adj.n_real and loaded.n_virtual == adj.n_virtual
        npt.assert_array_equal(loaded.learnable_mask, adj.learnable_mask)

    def test_header_is_json(self, tmp_path):
        dist = AdjacencyMatrix(np.zeros((2, 2)), 2, 0, "distance")
        path = tmp_path / "adj.csv"
        save_adjacency_csv(dist, path)
        header = json.loads(path.read_text().splitlines()[0][2:])
        assert header["kind"] == "distance"

    def test_road_graph_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        graph = random_graph(rng, n=5, n_edges=7)
        write_road_graph(graph, tmp_path / "nodes.csv", tmp_path / "edges.csv")
        loaded = read_road_graph(tmp_path / "nodes.csv", tmp_path / "edges.csv")
        assert loaded.node_ids == graph.node_ids
        assert loaded.num_nodes == graph.num_nodes
        npt.assert_allclose(np.array(loaded.coords), np.array(graph.coords))
        assert loaded.distances == graph.distances

    def test_unknown_edge_endpoint(self, tmp_path):
        (tmp_path / "nodes.csv").write_text("id,lat,lon\na,1,2\n")
        (tmp_path / "edges.csv").write_text("from_id,to_id,distance_m\na,zz,10\n")
        with pytest.raises(DataError, match="zz"):
            read_road_graph(tmp_path / "nodes.csv", tmp_path / "edges.csv")
