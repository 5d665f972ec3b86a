import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from semrate import graph
from semrate.graph import GraphError
from semrate.oracles import evaluate, finite_diff_grad

from _zoo import random_center, random_fusion_graph


def sum_graph():
    nodes = [
        graph.input_node("u0", 0, 1),
        graph.input_node("u1", 1, 1),
        graph.concat("cat", ["u0", "u1"]),
        graph.affine("y", "cat", [[1.0, 1.0]], [0.0]),
    ]
    return graph.CompGraph.from_nodes(nodes, "y")


GOLDEN_INPUT = [np.linspace(0, 1, 4), np.linspace(0.1, 0.9, 8), np.array([0.25, 0.75])]
GOLDEN_OUTPUT = 0.5347953861807122  # first verified run, cross-checked below by hand arithmetic


class TestValidate:
    def test_valid_two_modality_mlp(self):
        m = graph.make_toy_fusion(0, [3, 5], 8)
        assert graph.validate_graph(m.decoder) == []

    def test_cycle(self):
        nodes = (
            graph.input_node("x", 0, 2),
            graph.NodeSpec("A", "relu", ("B",)),
            graph.NodeSpec("B", "relu", ("A",)),
        )
        g = graph.CompGraph(nodes, "B", (("x", 2),))
        assert graph.validate_graph(g) == ["not a DAG"]

    def test_affine_column_mismatch(self):
        nodes = (graph.input_node("x", 0, 3), graph.affine("fc", "x", np.ones((2, 4)), np.zeros(2)))
        g = graph.CompGraph(nodes, "fc", (("x", 3),))
        problems = graph.validate_graph(g)
        assert len(problems) == 1 and problems[0].startswith("dim mismatch at node")

    def test_two_sinks(self):
        nodes = (
            graph.input_node("x", 0, 2),
            graph.relu("a", "x"),
            graph.relu("b", "x"),
        )
        g = graph.CompGraph(nodes, "b", (("x", 2),))
        assert any("sink" in p for p in graph.validate_graph(g))

    def test_out_of_order(self):
        nodes = (graph.relu("a", "x"), graph.input_node("x", 0, 2))
        g = graph.CompGraph(nodes, "a", (("x", 2),))
        assert "nodes not in topological order" in graph.validate_graph(g)

    def test_from_nodes_rejects(self):
        with pytest.raises(GraphError):
            graph.CompGraph.from_nodes([graph.input_node("x", 0, 2), graph.affine("fc", "x", np.ones((1, 3)))], "fc")

    def test_modality_gap(self):
        nodes = (graph.input_node("x", 1, 2), graph.relu("a", "x"))
        g = graph.CompGraph(nodes, "a", (("x", 2),))
        assert any("numbered" in p for p in graph.validate_graph(g))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            graph.NodeSpec("t", "tanh", ("x",))


class TestForward:
    def test_linear_sum(self):
        assert graph.forward(sum_graph(), [[0.2], [0.3]])[0] == pytest.approx(0.5, abs=1e-15)

    def test_relu_negative(self):
        g = graph.CompGraph.from_nodes([graph.input_node("x", 0, 1), graph.relu("r", "x")], "r")
        assert graph.forward(g, [[-1.0]])[0] == 0.0

    def test_golden_two_layer(self):
        m = graph.make_toy_fusion(7, [4, 8, 2], 16)
        y = graph.forward(m.decoder, GOLDEN_INPUT)[0]
        assert y == pytest.approx(GOLDEN_OUTPUT, abs=1e-12)
        w1, b1 = graph.affine_params(m.decoder)["fc1"]
        w2, b2 = graph.affine_params(m.decoder)["head"]
        x = np.concatenate(GOLDEN_INPUT)
        by_hand = sum(w2[0, j] * max(0.0, sum(w1[j, i] * x[i] for i in range(14)) + b1[j]) for j in range(16)) + b2[0]
        assert by_hand == pytest.approx(y, abs=1e-12)

    def test_dimension_mismatch_names_node(self):
        with pytest.raises(GraphError) as e:
            graph.forward(sum_graph(), [[0.2, 0.1], [0.3]])
        assert e.value.node_id == "u0"

    def test_wrong_modality_count(self):
        with pytest.raises(GraphError):
            graph.forward(sum_graph(), [[0.2]])

    def test_dict_inputs(self):
        assert graph.forward(sum_graph(), {0: [0.2], 1: [0.3]})[0] == pytest.approx(0.5)

    def test_unset_read_raises(self):
        v = graph._Values()
        with pytest.raises(RuntimeError):
            v["missing"]

    def test_thread_determinism(self):
        m = graph.make_toy_fusion(3, [2, 3], 8)
        x = [np.full(2, 0.3), np.full(3, 0.6)]
        ref = graph.forward(m.decoder, x)
        out = []
        threads = [threading.Thread(target=lambda: out.append(graph.forward(m.decoder, x))) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert all(np.array_equal(o, ref) for o in out)

    @given(st.integers(0, 2**32 - 1))
    def test_matches_standalone_interpreter(self, seed):
        rng = np.random.default_rng(seed)
        g = random_fusion_graph(rng)
        u = random_center(rng, g)
        assert np.allclose(graph.forward(g, u), evaluate(g, np.concatenate(u))[0], atol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_concat_then_slice_is_identity(self, seed):
        rng = np.random.default_rng(seed)
        g = random_fusion_graph(rng)
        u = random_center(rng, g)
        cat = graph.forward_all(g, u)["cat"]
        for sl, block in zip(g.block_slices(), u):
            assert np.array_equal(cat[sl], block)


class TestToyModel:
    def test_seed_reproducible(self):
        a = graph.make_toy_fusion(7, [2, 16, 8], 16)
        b = graph.make_toy_fusion(7, [2, 16, 8], 16)
        assert graph.weight_checksum(a.decoder) == graph.weight_checksum(b.decoder)
        assert all(graph.weight_checksum(x) == graph.weight_checksum(y) for x, y in zip(a.encoders, b.encoders))

    def test_shapes(self):
        m = graph.make_toy_fusion(1, [4, 8, 2], 16)
        assert m.decoder.total_input_dim == 14
        p = graph.affine_params(m.decoder)
        assert p["fc1"][0].shape == (16, 14) and p["head"][0].shape == (1, 16)

    @pytest.mark.parametrize("dims", [[0, 2], [3, -1]])
    def test_bad_dims(self, dims):
        with pytest.raises(ValueError):
            graph.make_toy_fusion(0, dims, 4)

    def test_weight_scale(self):
        m = graph.make_toy_fusion(11, [40, 40], 200)
        w = graph.affine_params(m.decoder)["fc1"][0]
        # N(0, 1) / sqrt(fan_in): variance times fan-in should be close to one
        assert w.var() * 80 == pytest.approx(1.0, rel=0.05)

    def test_features_in_unit_interval(self):
        m = graph.make_toy_fusion(5, [3, 6], 8)
        rng = np.random.default_rng(0)
        feats = m.encode([rng.random((5000, r)) for r in m.raw_dims])
        for f in feats:
            assert f.min() >= 0.0 and f.max() <= 1.0 + 1e-12
            assert f.std() > 0.05

    def test_mismatched_encoder(self):
        m = graph.make_toy_fusion(0, [2, 3], 4)
        with pytest.raises(GraphError):
            graph.ToyFusionModel(m.encoders[::-1], m.decoder)


class TestTraining:
    def test_zero_epochs_identity(self):
        m = graph.make_toy_fusion(2, [2, 3], 4)
        t = graph.make_teacher(m, 2)
        d = graph.make_dataset(m, t, 32, 2)
        assert graph.train_toy(m, d, 0, 0.1) is m

    def test_linear_target_linear_model(self):
        rng = np.random.default_rng(4)
        dims = [3, 2]
        dec = graph.mlp_decoder(rng, dims, None)
        feats = [rng.random((400, d)) for d in dims]
        labels = feats[0].sum(axis=1) + feats[1].sum(axis=1)
        enc = tuple(
            graph.CompGraph.from_nodes([graph.input_node("x", 0, d), graph.affine("id", "x", np.eye(d), np.zeros(d))], "id")
            for d in dims
        )
        model = graph.ToyFusionModel(enc, dec)
        trained = graph.train_toy(model, graph.Dataset(tuple(feats), labels), 4000, 0.2)
        assert graph.mse_loss(trained.decoder, feats, labels) < 1e-6
        # least-squares normal equations give the exact coefficients
        X = np.hstack(feats + [np.ones((400, 1))])
        coef = np.linalg.solve(X.T @ X, X.T @ labels)
        w, b = graph.affine_params(trained.decoder)["head"]
        assert np.allclose(np.append(w[0], b), coef, atol=1e-3)

    def test_loss_non_increasing(self):
        m = graph.make_toy_fusion(3, [2, 4], 8)
        t = graph.make_teacher(m, 3)
        d = graph.make_dataset(m, t, 256, 3)
        h = graph.train_toy(m, d, 300, 0.2).metadata["loss_history"]
        assert all(b <= a * 1.05 for a, b in zip(h, h[1:]))
        assert h[-1] < h[0]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_aborts(self):
        m = graph.make_toy_fusion(3, [2, 4], 8)
        t = graph.make_teacher(m, 3)
        d = graph.make_dataset(m, t, 64, 3)
        with pytest.raises(graph.TrainingError):
            graph.train_toy(m, d, 200, 1e6)

    def test_weight_decay_shrinks_unused_columns(self):
        m = graph.make_toy_fusion(3, [2, 4], 8)
        t = graph.make_teacher(m, 3, importance=[1.0, 0.0])
        d = graph.make_dataset(m, t, 256, 3)
        plain = graph.train_toy(m, d, 500, 0.2)
        decayed = graph.train_toy(m, d, 500, 0.2, weight_decay=0.01)
        col = lambda mm: np.abs(graph.affine_params(mm.decoder)["fc1"][0][:, 2:]).sum()
        assert col(decayed) < col(plain)

    @given(st.integers(0, 2**32 - 1))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        dims = [int(d) for d in rng.integers(1, 4, size=2)]
        dec = graph.mlp_decoder(rng, dims, 5)
        feats = [rng.random((6, d)) for d in dims]
        labels = rng.random(6)
        _, grads = graph.loss_gradients(dec, feats, labels)
        params = graph.affine_params(dec)
        for name, (w, b) in params.items():
            def loss_w(wv, name=name, b=b):
                return graph.mse_loss(graph.with_affine_params(dec, {name: (wv, b)}), feats, labels)
            fd = finite_diff_grad(loss_w, w, h=1e-5)
            an = grads[name][0]
            scale = np.maximum(np.abs(fd), 1e-3)
            assert np.max(np.abs(fd - an) / scale) < 1e-4


class TestSerialization:
    @given(st.integers(0, 2**32 - 1))
    def test_graph_round_trip_bit_exact(self, seed):
        g = random_fusion_graph(np.random.default_rng(seed))
        g2 = graph.loads(graph.dumps(g))
        assert graph.weight_checksum(g) == graph.weight_checksum(g2)
        assert graph.dumps(g2) == graph.dumps(g)

    def test_model_round_trip(self):
        m = graph.make_toy_fusion(7, [2, 16, 8], 16)
        m2 = graph.loads(graph.dumps(m))
        assert isinstance(m2, graph.ToyFusionModel)
        assert graph.weight_checksum(m2.decoder) == graph.weight_checksum(m.decoder)

    def test_field_names(self):
        import json
        d = json.loads(graph.dumps(sum_graph()))
        assert set(d) == {"nodes", "output", "modalities"}

    @pytest.mark.parametrize("text", ["not json", "[1, 2]", '{"nodes": 3}', '{"nodes": [], "output": "y", "modalities": []}'])
    def test_malformed(self, text):
        with pytest.raises(GraphError):
            graph.loads(text)
