import numpy as np
import numpy.testing as npt
import pytest

from vnsg.errors import DataError, ShapeError
from vnsg.graph import (
    AdjacencyMatrix,
    RoadGraph,
    build_all_ones_adjacency,
    build_distance_adjacency,
    build_semi_adaptive_adjacency,
)
from vnsg.model import (
    StgcnConfig,
    adjacency_tensor,
    forward,
    forward_batch,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from vnsg.tensor import Tensor, check_gradients, element, tsum


def chain_adjacency(n: int) -> AdjacencyMatrix:
    w = np.zeros((n, n))
    for i in range(n - 1):
        w[i, i + 1] = w[i + 1, i] = 1.0
    return AdjacencyMatrix(w, n, 0, "distance")


def small_config(**kwargs) -> StgcnConfig:
    defaults = dict(num_blocks=2, spatial_hidden=3, temporal_hidden=4,
                    kernel_size=2, input_window=8, output_horizons=4)
    defaults.update(kwargs)
    return StgcnConfig(**defaults)


class TestConfig:
    def test_defaults_are_valid(self):
        cfg = StgcnConfig().validate()
        assert (cfg.num_blocks, cfg.spatial_hidden, cfg.temporal_hidden) == (2, 16, 32)
        assert (cfg.kernel_size, cfg.input_window, cfg.output_horizons) == (3, 12, 20)
        assert cfg.remaining_steps() == 4

    def test_window_too_short(self):
        with pytest.raises(DataError, match="too short"):
            StgcnConfig(input_window=8).validate()  # needs >= 9 with K=3

    def test_bad_activation(self):
        with pytest.raises(DataError):
            StgcnConfig(activation_temporal="tanh").validate()


class TestForwardShapes:
    def test_output_shape(self):
        cfg = small_config()
        adj = chain_adjacency(5)
        params = init_params(cfg, 5, seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(3, 5, 8)))
        out = forward_batch(params, cfg, adj, x)
        assert out.shape == (3, 5, 4)

    def test_virtual_rows_dropped(self):
        cfg = small_config()
        dist = build_distance_adjacency(road_graph(5))
        adj = build_all_ones_adjacency(dist)
        params = init_params(cfg, 6, seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 6, 8)))
        out = forward_batch(params, cfg, adj, x)
        assert out.shape == (2, 5, 4)

    def test_shape_errors(self):
        cfg = small_config()
        adj = chain_adjacency(5)
        params = init_params(cfg, 5, seed=0)
        with pytest.raises(ShapeError, match="adjacency size"):
            forward_batch(params, cfg, adj, Tensor(np.zeros((2, 4, 8))))
        with pytest.raises(ShapeError, match="input window"):
            forward_batch(params, cfg, adj, Tensor(np.zeros((2, 5, 9))))
        with pytest.raises(ShapeError):
            forward(params, cfg, adj, Tensor(np.zeros((2, 5, 8))))

    def test_single_window_matches_batch(self):
        cfg = small_config()
        adj = chain_adjacency(4)
        params = init_params(cfg, 4, seed=1)
        x = np.random.default_rng(1).normal(size=(4, 8))
        single = forward(params, cfg, adj, Tensor(x))
        batched = forward_batch(params, cfg, adj, Tensor(x[None]))
        npt.assert_array_equal(single.data, batched.data[0])


class TestLocality:
    """Receptive-field checks: one spatial mixing layer per block means
    information travels at most num_blocks hops between nodes."""

    def grad_to_node(self, num_blocks, adj, probe_node, out_node):
        cfg = small_config(num_blocks=num_blocks, activation_spatial="identity",
                           input_window=10)
        params = init_params(cfg, adj.size, seed=0)
        x = Tensor(np.random.default_rng(2).normal(size=(adj.size, 10)),
                   requires_grad=True)
        out = forward(params, cfg, adj, x)
        element(out, (out_node, 0)).backward()
        return np.abs(x.grad[probe_node]).max()

    def test_decoupled_nodes_stay_independent(self):
        adj = AdjacencyMatrix(np.zeros((4, 4)), 4, 0, "distance")
        assert self.grad_to_node(2, adj, probe_node=3, out_node=0) == 0.0

    def test_one_block_reaches_one_hop_only(self):
        adj = chain_adjacency(5)
        assert self.grad_to_node(1, adj, probe_node=1, out_node=0) > 0.0
        assert self.grad_to_node(1, adj, probe_node=2, out_node=0) == 0.0

    def test_two_blocks_reach_two_hops(self):
        adj = chain_adjacency(5)
        assert self.grad_to_node(2, adj, probe_node=2, out_node=0) > 0.0
        assert self.grad_to_node(2, adj, probe_node=3, out_node=0) == 0.0

    def test_virtual_node_shortcuts_distant_pairs(self):
        # node 5 is 5 hops from node 0 on the chain: unreachable with two
        # blocks, but a fully connected virtual node bridges it in 2 hops
        n = 6
        chain = chain_adjacency(n)
        assert self.grad_to_node(2, chain, probe_node=5, out_node=0) == 0.0
        w = np.zeros((n + 1, n + 1))
        w[:n, :n] = chain.weights
        w[:n, n] = 1.0
        w[n, :n] = 1.0
        bridged = AdjacencyMatrix(w, n, 1, "all_ones")
        assert self.grad_to_node(2, bridged, probe_node=5, out_node=0) > 0.0


def road_graph(n: int) -> RoadGraph:
    # short chain links plus one kernel-pruned long road so the Gaussian
    # kernel width stays comfortably above the short distances
    coords = [(32.7 + 0.01 * i, -117.2 + 0.01 * i) for i in range(n)]
    distances = []
    for i in range(n - 1):
        distances.append((i, i + 1, 500.0))
        distances.append((i + 1, i, 500.0))
    distances.append((0, n - 1, 4000.0))
    distances.append((n - 1, 0, 4000.0))
    return RoadGraph([f"s{i:03d}" for i in range(n)], coords, distances, n).validate()


class TestSemiAdaptive:
    def test_zero_virtual_weights_match_distance_forward(self):
        from vnsg.graph import NodeEmbeddings

        cfg = small_config()
        dist = build_distance_adjacency(road_graph(5))
        # e1 == e2 makes the adaptive part identically zero
        e = np.random.default_rng(3).normal(size=(6, 4))
        emb = NodeEmbeddings(Tensor(e, requires_grad=True),
                             Tensor(e.copy(), requires_grad=True), 4, 0.1)
        semi = build_semi_adaptive_adjacency(dist, emb)
        params = init_params(cfg, 6, seed=0, embedding_dim=4)
        params.tensors["e1"] = emb.e1
        params.tensors["e2"] = emb.e2

        x_real = np.random.default_rng(4).normal(size=(2, 5, 8))
        out_dist = forward_batch(params, cfg, dist, Tensor(x_real))
        x_semi = np.concatenate([x_real, np.zeros((2, 1, 8))], axis=1)
        out_semi = forward_batch(params, cfg, semi, Tensor(x_semi),
                                 embedding_dim=4, adaptive_threshold=0.1)
        npt.assert_array_equal(out_dist.data, out_semi.data)

    def test_adjacency_rebuilt_from_live_embeddings(self):
        from vnsg.graph import init_embeddings

        dist = build_distance_adjacency(road_graph(4))
        emb = init_embeddings(5, 3, 0.0, seed=5)
        semi = build_semi_adaptive_adjacency(dist, emb)
        params = init_params(small_config(), 5, seed=0, embedding_dim=3)
        before = adjacency_tensor(params, semi, 3, 0.0).data.copy()
        params.tensors["e1"].data *= 2.0
        after = adjacency_tensor(params, semi, 3, 0.0).data
        assert np.abs(after - before).max() > 0
        # the fixed distance block never moves
        npt.assert_array_equal(after[:4, :4], before[:4, :4])


class TestFullModelGradients:
    def test_gradcheck_all_parameters(self):
        from vnsg.graph import init_embeddings

        cfg = small_config(input_window=6, output_horizons=3)
        dist = build_distance_adjacency(road_graph(4))
        emb = init_embeddings(5, 2, 0.05, seed=6)
        semi = build_semi_adaptive_adjacency(dist, emb)
        params = init_params(cfg, 5, seed=7, embedding_dim=2)
        x = np.random.default_rng(8).normal(size=(2, 5, 6))
        x[:, 4] = 0.0

        def loss():
            return tsum(forward_batch(params, cfg, semi, Tensor(x),
                                      embedding_dim=2, adaptive_threshold=0.05))

        report = check_gradients(loss, params.flat)
        assert report.max_relative_error < 1e-4


class TestPredict:
    def test_denormalizes(self):
        from vnsg.data import WindowedDataset

        cfg = small_config()
        adj = chain_adjacency(3)
        params = init_params(cfg, 3, seed=0)
        inputs = np.random.default_rng(9).normal(size=(5, 3, 8))
        ds = WindowedDataset(inputs, np.zeros((5, 3, 4)), norm_mean=100.0,
                             norm_std=7.0, split="test", n_real=3, n_virtual=0)
        got = predict(params, cfg, adj, ds, batch_size=2)
        raw = forward_batch(params, cfg, adj, Tensor(inputs)).data
        npt.assert_array_equal(got, raw * 7.0 + 100.0)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        cfg = small_config(raw_adjacency=True)
        params = init_params(cfg, 6, seed=11, embedding_dim=3)
        meta = {"best_epoch": 4, "adjacency_kind": "semi_adaptive"}
        path = tmp_path / "model.vnsg"
        save_checkpoint(path, params, cfg, meta)
        loaded, cfg2, meta2 = load_checkpoint(path)
        assert cfg2 == cfg
        assert meta2 == meta
        assert loaded.names == params.names
        for name in params.names:
            npt.assert_array_equal(loaded.tensors[name].data, params.tensors[name].data)

    def test_header_layout(self, tmp_path):
        cfg = small_config()
        params = init_params(cfg, 4, seed=0)
        path = tmp_path / "model.vnsg"
        save_checkpoint(path, params, cfg)
        blob = path.read_bytes()
        assert blob[:4] == b"VNSG"
        assert int.from_bytes(blob[4:8], "little") == 1
        jlen = int.from_bytes(blob[8:16], "little")
        import json

        head = json.loads(blob[16 : 16 + jlen])
        assert head["config"]["kernel_size"] == 2

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.vnsg"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DataError, match="not a VNSG checkpoint"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="cannot read"):
            load_checkpoint(tmp_path / "absent.vnsg")
