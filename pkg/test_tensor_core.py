#!/usr/bin/env python3
"""
Test layers, graph forward/backward, SGD and the training loop
"""
import sys
import os
sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest

from bottlenet_errors import BackwardError, DatasetError, NonFiniteGradientError, ShapeError
from synthetic_datasets import Dataset, make_dataset
from tensor_core import (
    Dense, LayerSpec, NetworkGraph, ReLU, backward, evaluate, forward, predict, same_padding,
    sgd_step, softmax_cross_entropy, train,
)


def conv(filters, k=3, stride=1, padding='same'):
    return {'kind': 'conv2d', 'kernel_h': k, 'kernel_w': k, 'stride': stride, 'filters': filters,
            'padding': padding}


def numeric_grad(loss, array, step=1e-4):
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        original = array[idx]
        array[idx] = original + step
        plus = loss()
        array[idx] = original - step
        minus = loss()
        array[idx] = original
        grad[idx] = (plus - minus) / (2 * step)
    return grad


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-4)


def check_gradients(graph, x, training=True):
    """Every parameter and the input gradient against central differences"""
    weights = np.random.default_rng(99).normal(size=graph.forward(x, training=training).shape)
    grads = graph.backward(weights)
    input_grad = graph.input_grad.copy()

    def loss():
        return float(np.sum(graph.forward(x, training=training) * weights))

    params = graph.parameters()
    assert set(grads) == set(params)
    for key, value in params.items():
        assert grads[key].shape == value.shape
        assert rel_error(grads[key], numeric_grad(loss, value)) < 1e-4, key
    assert rel_error(input_grad, numeric_grad(loss, x)) < 1e-4


# ----------------------------------------------------------------------------
# Forward
# ----------------------------------------------------------------------------

def test_identity_one_by_one_conv():
    graph = NetworkGraph([conv(1, k=1)], (2, 2, 1), [])
    graph.set_parameters({'0.weight': np.ones((1, 1, 1, 1)), '0.bias': np.zeros(1)})
    assert np.array_equal(forward(graph, np.ones((1, 2, 2, 1))), np.ones((1, 2, 2, 1)))


def test_relu_forward():
    layer = ReLU(LayerSpec('relu'), (1, 3, 1), np.random.default_rng(0))
    out = layer.forward(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 3, 1), training=False)
    assert out.reshape(-1).tolist() == [0.0, 0.0, 2.0]


def test_strided_same_conv_shape():
    graph = NetworkGraph([conv(5, stride=2)], (56, 56, 8), [])
    assert graph.output_shape == (28, 28, 5)
    assert forward(graph, np.zeros((1, 56, 56, 8))).shape == (1, 28, 28, 5)


@pytest.mark.parametrize("size,kernel,stride,expected", [
    (56, 3, 2, (28, 0, 1)), (28, 3, 1, (28, 1, 1)), (7, 3, 2, (4, 1, 1)), (28, 1, 2, (14, 0, 0)),
])
def test_same_padding(size, kernel, stride, expected):
    assert same_padding(size, kernel, stride) == expected


def test_valid_padding_shape():
    graph = NetworkGraph([conv(2, k=3, padding='valid')], (6, 5, 1), [])
    assert graph.output_shape == (4, 3, 2)


def test_forward_shape_mismatch_names_layer():
    graph = NetworkGraph([conv(2), {'kind': 'relu'}], (4, 4, 1), [])
    with pytest.raises(ShapeError) as info:
        graph.forward(np.zeros((1, 5, 4, 1)))
    assert info.value.layer_index == 0


def test_forward_upto_returns_intermediate():
    graph = NetworkGraph([conv(3), {'kind': 'relu'}, {'kind': 'avgpool-global'}], (4, 4, 1), [1])
    assert graph.forward(np.ones((2, 4, 4, 1)), upto=1).shape == (2, 4, 4, 3)
    assert graph.shape_at(graph.layer_for_partition(1)) == (4, 4, 3)


def test_invalid_graphs_rejected():
    with pytest.raises(ShapeError):
        NetworkGraph([conv(2), {'kind': 'relu'}], (4, 4, 1), [1, 1])
    with pytest.raises(ShapeError):
        NetworkGraph([conv(2)], (4, 4, 1), [1])
    with pytest.raises(ShapeError) as info:
        NetworkGraph([{'kind': 'relu'}, {'kind': 'conv2d', 'kernel_h': 0, 'kernel_w': 3, 'filters': 1}],
                     (4, 4, 1), [])
    assert info.value.layer_index == 1


def test_spec_round_trip():
    graph = NetworkGraph([conv(2), {'kind': 'batchnorm'}, {'kind': 'relu'}], (4, 4, 1), [2], seed=3)
    rebuilt = NetworkGraph.from_spec(graph.to_spec(), seed=3)
    for key, value in graph.parameters().items():
        assert np.array_equal(rebuilt.parameters()[key], value)


# ----------------------------------------------------------------------------
# Backward
# ----------------------------------------------------------------------------

def test_dense_gradient_values():
    layer = Dense(LayerSpec('dense', {'units': 1}), (1, 1, 1), np.random.default_rng(0))
    layer.params['weight'] = np.array([[3.0]])
    layer.forward(np.full((1, 1, 1, 1), 2.0), training=True)
    _, grads = layer.backward(np.ones((1, 1, 1, 1)))
    assert grads['weight'][0, 0] == 2.0


def test_relu_gradient_zero_at_negative_input():
    layer = ReLU(LayerSpec('relu'), (1, 2, 1), np.random.default_rng(0))
    layer.forward(np.array([-0.5, 1.5]).reshape(1, 1, 2, 1), training=True)
    dx, _ = layer.backward(np.ones((1, 1, 2, 1)))
    assert dx.reshape(-1).tolist() == [0.0, 1.0]


def test_backward_without_forward():
    graph = NetworkGraph([conv(2)], (4, 4, 1), [])
    with pytest.raises(BackwardError):
        backward(graph, np.ones((1, 4, 4, 2)))


def test_backward_shape_mismatch():
    graph = NetworkGraph([conv(2)], (4, 4, 1), [])
    graph.forward(np.ones((1, 4, 4, 1)))
    with pytest.raises(ShapeError):
        graph.backward(np.ones((1, 4, 4, 3)))


def test_conv_gradients():
    rng = np.random.default_rng(1)
    graph = NetworkGraph([conv(3, k=3, stride=2)], (5, 5, 2), [], seed=1)
    graph.set_parameters({'0.bias': rng.normal(size=3)})
    check_gradients(graph, rng.normal(size=(2, 5, 5, 2)))


def test_valid_conv_gradients():
    rng = np.random.default_rng(2)
    graph = NetworkGraph([conv(2, k=2, stride=1, padding='valid')], (4, 3, 2), [], seed=2)
    check_gradients(graph, rng.normal(size=(2, 4, 3, 2)))


@pytest.mark.parametrize("out_size", [6, 5])
def test_transposed_conv_gradients(out_size):
    rng = np.random.default_rng(3)
    spec = {'kind': 'conv2d_transpose', 'kernel_h': 3, 'kernel_w': 3, 'stride': 2, 'filters': 2,
            'out_h': out_size, 'out_w': out_size}
    graph = NetworkGraph([spec], (3, 3, 2), [], seed=3)
    assert graph.output_shape == (out_size, out_size, 2)
    check_gradients(graph, rng.normal(size=(2, 3, 3, 2)))


def test_transposed_conv_rejects_unrestorable_shape():
    spec = {'kind': 'conv2d_transpose', 'kernel_h': 3, 'kernel_w': 3, 'stride': 2, 'filters': 2,
            'out_h': 10, 'out_w': 10}
    with pytest.raises(ShapeError):
        NetworkGraph([spec], (3, 3, 2), [])


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(training):
    rng = np.random.default_rng(4)
    graph = NetworkGraph([{'kind': 'batchnorm'}], (3, 3, 2), [])
    graph.set_parameters({'0.gamma': rng.uniform(0.5, 1.5, 2), '0.beta': rng.normal(size=2)})
    graph.set_buffers({'0.running_mean': rng.normal(size=2), '0.running_var': rng.uniform(0.5, 2, 2)})
    check_gradients(graph, rng.normal(size=(3, 3, 3, 2)) * 2 + 1, training=training)


def test_dense_and_pool_gradients():
    rng = np.random.default_rng(5)
    graph = NetworkGraph([{'kind': 'avgpool-global'}, {'kind': 'dense', 'units': 3},
                          {'kind': 'softmax-xent-head'}], (3, 2, 4), [], seed=5)
    check_gradients(graph, rng.normal(size=(2, 3, 2, 4)))


def test_two_layer_conv_net_gradients():
    rng = np.random.default_rng(6)
    graph = NetworkGraph([conv(3, stride=2), {'kind': 'batchnorm'}, conv(2), {'kind': 'dense', 'units': 3},
                          {'kind': 'softmax-xent-head'}], (6, 6, 1), [1], seed=6)
    check_gradients(graph, rng.normal(size=(3, 6, 6, 1)))


def test_relu_gradients_away_from_kink():
    rng = np.random.default_rng(7)
    graph = NetworkGraph([{'kind': 'relu'}], (3, 3, 2), [])
    x = rng.uniform(0.1, 1.0, size=(2, 3, 3, 2)) * rng.choice([-1.0, 1.0], size=(2, 3, 3, 2))
    check_gradients(graph, x)


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(4, 1, 1, 3))
    labels = np.array([0, 2, 1, 2])
    _, grad = softmax_cross_entropy(logits, labels)
    numeric = numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits)
    assert rel_error(grad, numeric) < 1e-4


# ----------------------------------------------------------------------------
# SGD
# ----------------------------------------------------------------------------

def test_sgd_step_example():
    updated = sgd_step({'p': np.array(1.0)}, {'p': np.array(0.5)}, 0.1)
    assert updated['p'] == pytest.approx(0.95)


def test_sgd_zero_gradient_leaves_parameter():
    p = np.array([1.0, -2.0])
    assert np.array_equal(sgd_step({'p': p}, {'p': np.zeros(2)}, 0.3)['p'], p)


def test_two_steps_equal_summed_step():
    p, g1, g2 = np.array([0.5, 1.0]), np.array([0.25, -0.5]), np.array([0.5, 0.75])
    twice = sgd_step(sgd_step({'p': p}, {'p': g1}, 0.5), {'p': g2}, 0.5)
    once = sgd_step({'p': p}, {'p': g1 + g2}, 0.5)
    assert np.allclose(twice['p'], once['p'])


def test_sgd_rejects_non_finite_gradient():
    with pytest.raises(NonFiniteGradientError) as info:
        sgd_step({'a': np.ones(2), 'b': np.ones(2)}, {'a': np.ones(2), 'b': np.array([np.nan, 0.0])}, 0.1)
    assert info.value.parameters == ['b']


def test_sgd_rejects_non_positive_lr():
    with pytest.raises(ValueError):
        sgd_step({'p': np.ones(1)}, {'p': np.ones(1)}, 0.0)


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------

def linear_graph(seed=0, dims=(8, 8, 1), classes=2):
    return NetworkGraph([{'kind': 'dense', 'units': classes}, {'kind': 'softmax-xent-head'}], dims, [],
                        seed=seed)


def test_train_separable_blobs():
    dataset = make_dataset('blobs', 200, (8, 8, 1), 2, seed=1)
    result = train(linear_graph(), dataset, epochs=20, lr=0.1, seed=1)
    assert result.accuracy >= 0.95
    assert len(result.losses) == 20
    assert result.losses[-1] < result.losses[0]


def test_zero_epochs_leaves_graph_unchanged():
    dataset = make_dataset('blobs', 60, (8, 8, 1), 2, seed=2)
    graph = NetworkGraph([conv(2), {'kind': 'batchnorm'}, {'kind': 'relu'}, {'kind': 'avgpool-global'},
                          {'kind': 'dense', 'units': 2}, {'kind': 'softmax-xent-head'}], (8, 8, 1), [2])
    before = {k: v.copy() for k, v in {**graph.parameters(), **graph.buffers()}.items()}
    result = train(graph, dataset, epochs=0, lr=0.1, seed=2)
    after = {**graph.parameters(), **graph.buffers()}
    assert all(np.array_equal(before[k], after[k]) for k in before)
    _, held_out = dataset.split(0.15, 2)
    assert result.accuracy == evaluate(graph, held_out)


def test_training_is_deterministic():
    dataset = make_dataset('stripes', 80, (8, 8, 1), 2, seed=3)

    def run():
        graph = NetworkGraph([conv(2), {'kind': 'batchnorm'}, {'kind': 'relu'}, {'kind': 'avgpool-global'},
                              {'kind': 'dense', 'units': 2}, {'kind': 'softmax-xent-head'}], (8, 8, 1), [],
                             seed=3)
        return train(graph, dataset, epochs=2, lr=0.05, seed=3, batch_size=16)

    first, second = run(), run()
    assert first.losses == second.losses
    for key, value in first.graph.parameters().items():
        assert np.array_equal(value, second.graph.parameters()[key])


def test_train_rejects_empty_and_out_of_range():
    empty = Dataset(np.zeros((0, 8, 8, 1)), np.zeros(0), 2)
    with pytest.raises(DatasetError):
        train(linear_graph(), empty, epochs=1, lr=0.1, seed=0)
    too_many = make_dataset('blobs', 30, (8, 8, 1), 3, seed=0)
    with pytest.raises(DatasetError):
        train(linear_graph(classes=2), too_many, epochs=1, lr=0.1, seed=0)


def test_batchnorm_eval_uses_running_statistics():
    graph = NetworkGraph([{'kind': 'batchnorm'}], (2, 2, 1), [])
    x = np.arange(8, dtype=np.float64).reshape(2, 2, 2, 1)
    graph.set_training(True)
    graph.forward(x)
    running_mean, running_var = graph.buffers()['0.running_mean'], graph.buffers()['0.running_var']
    assert running_mean[0] == pytest.approx(0.1 * x.mean())
    assert running_var[0] == pytest.approx(0.9 + 0.1 * x.var())

    graph.set_training(False)
    assert not graph.training
    expected = (x - running_mean[0]) / np.sqrt(running_var[0] + 1e-5)
    assert np.allclose(graph.forward(x), expected)
    assert np.array_equal(graph.buffers()['0.running_mean'], running_mean)


def test_predict_restores_training_flag():
    graph = NetworkGraph([{'kind': 'batchnorm'}], (2, 2, 1), [])
    graph.set_training(True)
    predict(graph, np.ones((1, 2, 2, 1)))
    assert graph.training


def test_cropped_training_uses_graph_input_size():
    dataset = make_dataset('blobs', 40, (10, 10, 1), 2, seed=4)
    result = train(linear_graph(dims=(8, 8, 1)), dataset, epochs=1, lr=0.1, seed=4, crop=True)
    assert 0.0 <= result.accuracy <= 1.0


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
