import math

import numpy as np
import pytest

from autodiff import Tensor
from conftest import graph_from_edges
from errors import EmptyMask, EmptyTrainMask, InvalidConfig, LeakageDetected, ShapeMismatch, UntrainedModel
from neuralnet import (ARCHITECTURES, EarlyStopping, ModelSpec, OptimizerState, TrainConfig, TrainedModel,
                       forward, gatv2_forward, gcn_forward, gin_forward, graph_operators, init_parameters,
                       load_checkpoint, loss_and_gradients, mse_loss, normalize_adjacency, optimizer_step,
                       predict, sage_forward, save_checkpoint, train)


def leaky(values, slope):
    return np.where(values > 0, values, slope * values)


@pytest.fixture
def kite():
    """Triangle 0-1-2 with a tail 2-3-4"""
    return graph_from_edges(5, [(0, 1), (1, 2), (0, 2), (2, 3), (3, 4)])


@pytest.fixture
def features():
    return np.random.default_rng(7).standard_normal((5, 3))


class TestModelSpec:
    def test_layer_widths(self):
        assert ModelSpec(depth=3, hidden1=16, hidden2=8).layer_widths() == [16, 16, 8]
        assert ModelSpec(depth=1, hidden1=16, hidden2=8).layer_widths() == [8]

    def test_rejects_unknown_architecture(self):
        with pytest.raises(InvalidConfig):
            ModelSpec(architecture='transformer')

    def test_rejects_bad_dropout(self):
        with pytest.raises(InvalidConfig):
            ModelSpec(dropout=1.0)


class TestOperators:
    def test_triangle_normalization(self, triangle):
        np.testing.assert_allclose(normalize_adjacency(triangle).toarray(), np.full((3, 3), 1 / 3))

    def test_edge_index_includes_self_loops(self, path_graph):
        ops = graph_operators(path_graph)
        assert ops.edge_src.size == 2 * path_graph.n_edges + 5
        assert np.all(np.diff(ops.edge_dst) >= 0)
        assert ops.segment_starts.tolist() == [0, 2, 5, 8, 11]


class TestLayers:
    def test_gcn_matches_dense(self, kite, features):
        w = np.random.default_rng(1).standard_normal((3, 4))
        a_hat = normalize_adjacency(kite)
        out = gcn_forward(a_hat, features, w, activation='relu').data
        np.testing.assert_allclose(out, np.maximum(a_hat.toarray() @ features @ w, 0.0))

    def test_gin_matches_dense(self, kite, features):
        rng = np.random.default_rng(2)
        w1, b1 = rng.standard_normal((3, 4)), rng.standard_normal(4)
        w2, b2 = rng.standard_normal((4, 2)), rng.standard_normal(2)
        eps = np.array([0.3])
        out = gin_forward(kite.adjacency, features, eps, [w1, b1, w2, b2], activation=None).data
        z = 1.3 * features + kite.adjacency.toarray() @ features
        np.testing.assert_allclose(out, np.maximum(z @ w1 + b1, 0.0) @ w2 + b2)

    def test_sage_isolated_node_aggregates_zero(self, features):
        graph = graph_from_edges(5, [(0, 1), (1, 2)])
        ops = graph_operators(graph)
        w = np.random.default_rng(3).standard_normal((6, 2))
        out = sage_forward(ops.mean_aggregator, features, w, activation=None).data
        np.testing.assert_allclose(out[4], features[4] @ w[:3])
        neighbour_mean = (features[0] + features[2]) / 2
        np.testing.assert_allclose(out[1], features[1] @ w[:3] + neighbour_mean @ w[3:])

    def test_sage_shape_check(self, kite, features):
        ops = graph_operators(kite)
        with pytest.raises(ShapeMismatch):
            sage_forward(ops.mean_aggregator, features, np.ones((3, 2)))

    @pytest.mark.parametrize('heads', [1, 2])
    def test_gatv2_matches_dense(self, kite, features, heads):
        rng = np.random.default_rng(4)
        width = 3
        w_src = rng.standard_normal((3, heads * width))
        w_dst = rng.standard_normal((3, heads * width))
        att = rng.standard_normal((heads, width))
        ops = graph_operators(kite)
        out, alpha = gatv2_forward(ops, features, w_src, w_dst, att, heads=heads, slope=0.2,
                                   concat_heads=False, activation=None, return_attention=True)

        dense = kite.adjacency.toarray() + np.eye(5)
        expected = np.zeros((5, width))
        for i in range(5):
            neighbours = np.flatnonzero(dense[i])
            for k in range(heads):
                cols = slice(k * width, (k + 1) * width)
                src = features[neighbours] @ w_src[:, cols]
                scores = leaky(features[i] @ w_dst[:, cols] + src, 0.2) @ att[k]
                weights = np.exp(scores - scores.max())
                weights /= weights.sum()
                expected[i] += weights @ src / heads
        np.testing.assert_allclose(out.data, expected, atol=1e-12)
        sums = np.add.reduceat(alpha, ops.segment_starts, axis=0)
        np.testing.assert_allclose(sums, 1.0, rtol=0, atol=1e-12)

    def test_gatv2_uniform_attention_on_identical_features(self, path_graph):
        ops = graph_operators(path_graph)
        rng = np.random.default_rng(5)
        _, alpha = gatv2_forward(ops, np.ones((5, 2)), rng.standard_normal((2, 4)), rng.standard_normal((2, 4)),
                                 rng.standard_normal((1, 4)), return_attention=True)
        np.testing.assert_allclose(alpha[:2, 0], [0.5, 0.5])
        np.testing.assert_allclose(alpha[2:5, 0], [1 / 3] * 3)


class TestLoss:
    def test_masked_mean(self):
        loss = mse_loss(Tensor([1.0, 2.0, 10.0]), np.array([0.0, 0.0, 0.0]), np.array([True, True, False]))
        assert float(loss.data) == pytest.approx(2.5)

    def test_empty_mask(self):
        with pytest.raises(EmptyMask):
            mse_loss(Tensor([1.0]), np.array([1.0]), np.array([False]))

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatch):
            mse_loss(Tensor([1.0, 2.0]), np.array([1.0]), np.array([True]))


class TestGradients:
    @pytest.mark.parametrize('seed', range(20))
    @pytest.mark.parametrize('architecture', ARCHITECTURES)
    def test_matches_finite_differences(self, architecture, seed):
        rng = np.random.default_rng(seed)
        chords = [tuple(pair) for pair in rng.choice(8, size=(4, 2)) if pair[0] != pair[1]]
        graph = graph_from_edges(8, [(i, (i + 1) % 8) for i in range(8)] + chords)
        features = rng.standard_normal((8, 3))
        spec = ModelSpec(architecture=architecture, depth=2, hidden1=4, hidden2=3, dropout=0.0,
                         activation='leaky_relu', gat_heads=2, gin_epsilon_init=0.1)
        ops = graph_operators(graph)
        params = init_parameters(spec, 3, seed=seed)
        y = rng.standard_normal(8)
        mask = rng.uniform(size=8) < 0.7
        mask[0] = True
        _, grads = loss_and_gradients(spec, params, ops, features, y, mask)

        eps = 1e-5
        for name, value in params.items():
            numeric = np.zeros_like(value)
            for index in np.ndindex(value.shape):
                bumped = {k: v.copy() for k, v in params.items()}
                bumped[name][index] += eps
                upper, _ = loss_and_gradients(spec, bumped, ops, features, y, mask)
                bumped[name][index] -= 2 * eps
                lower, _ = loss_and_gradients(spec, bumped, ops, features, y, mask)
                numeric[index] = (upper - lower) / (2 * eps)
            np.testing.assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-6, err_msg=name)


class TestParameters:
    def test_names_and_shapes(self):
        params = init_parameters(ModelSpec(architecture='gatv2', depth=2, hidden1=8, hidden2=4, gat_heads=2), 5, 0)
        assert params['layer0.w_src'].shape == (5, 16)
        assert params['layer0.att'].shape == (2, 8)
        assert params['layer1.w_src'].shape == (16, 8)
        assert params['head.weight'].shape == (4, 1)

    def test_seeded(self):
        spec = ModelSpec(architecture='gcn')
        first, second = init_parameters(spec, 4, 3), init_parameters(spec, 4, 3)
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])


class TestOptimizers:
    def test_sgd_with_weight_decay(self):
        params = {'w': np.array([1.0, -2.0])}
        grads = {'w': np.array([0.5, 0.5])}
        updated = optimizer_step(OptimizerState('sgd'), params, grads, TrainConfig(lr=0.1, weight_decay=0.1))
        np.testing.assert_allclose(updated['w'], [1.0 - 0.1 * 0.6, -2.0 - 0.1 * 0.3])

    def test_adam_first_step_is_lr_sized(self):
        params = {'w': np.array([1.0, 1.0])}
        grads = {'w': np.array([3.0, -0.01])}
        updated = optimizer_step(OptimizerState('adam'), params, grads, TrainConfig(lr=0.01, weight_decay=0.0))
        np.testing.assert_allclose(updated['w'], [0.99, 1.01], rtol=1e-5)

    def test_early_stopping_patience(self):
        stopper = EarlyStopping(patience=2)
        losses = [3.0, 2.0, 2.5, 2.6]
        stops = [stopper.update(epoch, loss, {'w': np.zeros(1)}) for epoch, loss in enumerate(losses, start=1)]
        assert stops == [False, False, False, True]
        assert stopper.best_epoch == 2


class TestTrain:
    @pytest.fixture
    def problem(self, grid5):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((25, 3))
        y = x @ np.array([1.0, -0.5, 0.25])
        mask = np.ones(25, dtype=bool)
        return grid5, x, y, mask

    def test_loss_decreases(self, problem):
        graph, x, y, mask = problem
        spec = ModelSpec(architecture='gcn', depth=2, hidden1=16, hidden2=8, dropout=0.0)
        model = train(spec, graph, x, y, mask, None, TrainConfig(lr=0.01, epochs=60, patience=60, seed=1))
        log = model.log_frame()
        assert log['train_loss'].iloc[-1] < log['train_loss'].iloc[0]
        assert model.best_epoch is not None

    def test_deterministic(self, problem):
        graph, x, y, mask = problem
        spec = ModelSpec(architecture='gatv2', depth=2, hidden1=8, hidden2=4)
        config = TrainConfig(lr=0.01, epochs=10, patience=10, seed=3)
        first = train(spec, graph, x, y, mask, None, config)
        second = train(spec, graph, x, y, mask, None, config)
        np.testing.assert_array_equal(predict(first, graph, x), predict(second, graph, x))

    def test_withheld_label_in_mask(self, problem):
        graph, x, y, mask = problem
        poisoned = y.copy()
        poisoned[4] = np.nan
        with pytest.raises(LeakageDetected):
            train(ModelSpec(architecture='gcn'), graph, x, poisoned, mask, None, TrainConfig(epochs=1))

    def test_empty_train_mask(self, problem):
        graph, x, y, mask = problem
        with pytest.raises(EmptyTrainMask):
            train(ModelSpec(), graph, x, y, np.zeros(25, dtype=bool), None, TrainConfig(epochs=1))

    def test_overlapping_masks(self, problem):
        graph, x, y, mask = problem
        with pytest.raises(InvalidConfig):
            train(ModelSpec(), graph, x, y, mask, mask, TrainConfig(epochs=1))

    def test_row_mismatch(self, problem):
        graph, x, y, mask = problem
        with pytest.raises(ShapeMismatch):
            train(ModelSpec(), graph, x[:20], y, mask, None, TrainConfig(epochs=1))


class TestInference:
    def test_receptive_field_is_depth_hops(self):
        graph = graph_from_edges(10, [(i, i + 1) for i in range(9)])
        spec = ModelSpec(architecture='gcn', depth=2, hidden1=4, hidden2=4)
        model = TrainedModel(spec=spec, parameters=init_parameters(spec, 2, 0), in_dim=2, seed=0)
        x = np.random.default_rng(0).standard_normal((10, 2))
        moved = x.copy()
        moved[9] += 5.0
        before, after = predict(model, graph, x), predict(model, graph, moved)
        np.testing.assert_array_equal(before[:7], after[:7])

    @pytest.mark.parametrize('architecture', ARCHITECTURES)
    def test_relabelling_nodes_permutes_predictions(self, architecture):
        rng = np.random.default_rng(11)
        edges = [(i, (i + 1) % 10) for i in range(10)] + [(0, 5), (2, 7), (3, 9)]
        graph = graph_from_edges(10, edges)
        perm = rng.permutation(10)
        position = np.argsort(perm)
        relabelled = graph_from_edges(10, [(position[a], position[b]) for a, b in edges])
        spec = ModelSpec(architecture=architecture, depth=2, hidden1=6, hidden2=4, dropout=0.5, gat_heads=2)
        model = TrainedModel(spec=spec, parameters=init_parameters(spec, 3, 0), in_dim=3, seed=0)
        x = rng.standard_normal((10, 3))
        np.testing.assert_allclose(predict(model, relabelled, x[perm]), predict(model, graph, x)[perm],
                                   rtol=0, atol=1e-10)

    def test_width_mismatch(self, kite, features):
        spec = ModelSpec(architecture='gcn')
        model = TrainedModel(spec=spec, parameters=init_parameters(spec, 4, 0), in_dim=4, seed=0)
        with pytest.raises(ShapeMismatch):
            forward(model, kite, features)

    def test_untrained(self, kite, features):
        with pytest.raises(UntrainedModel):
            forward(TrainedModel(spec=ModelSpec(), parameters={}, in_dim=3, seed=0), kite, features)

    def test_checkpoint_round_trip(self, tmp_path, kite, features):
        spec = ModelSpec(architecture='gin', depth=2, hidden1=4, hidden2=3)
        y = features[:, 0]
        mask = np.ones(5, dtype=bool)
        val = np.zeros(5, dtype=bool)
        model = train(spec, kite, features, y, mask, val, TrainConfig(epochs=5, patience=5, seed=2))
        restored = load_checkpoint(save_checkpoint(model, tmp_path / 'model.json'))
        np.testing.assert_array_equal(predict(model, kite, features), predict(restored, kite, features))
        assert restored.spec == spec
        assert math.isnan(restored.training_log[0]['val_loss'])
