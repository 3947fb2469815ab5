import numpy as np
import pytest

from core import engine
from core.engine import DenseLayer, LayeredNet, Retain, init_net, layer_backward
from core.errors import InvalidArgumentError, ShapeError, StateError
from core.netspec import ModelSpec
from core.swav import SwavConfig, compute_codes, swav_loss_from_scores


def identity_net(dim=2, n_prototypes=3):
    layer = DenseLayer(np.eye(dim), np.zeros(dim), "none")
    return LayeredNet([layer], engine.normalize_prototypes(np.ones((n_prototypes, dim))))


def test_identity_net_normalizes_input():
    acts = engine.forward(identity_net(), np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(acts.z, [[0.6, 0.8]], rtol=1e-12)


def test_zero_input_is_epsilon_guarded():
    net = LayeredNet([DenseLayer(np.eye(2), np.zeros(2), "relu")], np.eye(2))
    acts = engine.forward(net, np.array([[-1.0, -2.0]]))
    assert np.all(np.isfinite(acts.z))
    np.testing.assert_array_equal(acts.z, [[0.0, 0.0]])


def test_forward_rejects_bad_input(small_net):
    with pytest.raises(ShapeError):
        engine.forward(small_net, np.zeros((3, small_net.input_dim + 1)))


def test_linear_layer_closed_form_gradient(rng):
    x = rng.standard_normal((5, 3))
    w = rng.standard_normal((3, 2))
    y = rng.standard_normal((5, 2))
    out = x @ w
    grad_out = 2.0 * (out - y) / x.shape[0]
    _, grad_w, _ = layer_backward(w, "none", x, out, grad_out)
    np.testing.assert_allclose(grad_w, x.T @ (x @ w - y) * 2 / 5, rtol=1e-12)


def _loss(net, x, cfg, codes, views, batch):
    acts = engine.forward(net, x)
    return swav_loss_from_scores(acts.scores.reshape(views, batch, -1), cfg, codes)


def test_swav_gradients_match_finite_differences(rng):
    spec = ModelSpec((6, 5), (2, 1), head_dims=(5, 4), n_prototypes=3)
    net = init_net(spec, 5, rng)
    cfg = SwavConfig(n_prototypes=3, n_global_views=2, n_local_views=1)
    views, batch = cfg.n_views, 4
    x = rng.standard_normal((views * batch, 5))
    acts = engine.forward(net, x)
    codes = compute_codes(acts.scores.reshape(views, batch, -1), cfg)
    result = _loss(net, x, cfg, codes, views, batch)
    grads = engine.backward(net, acts, result.grad.reshape(views * batch, -1))

    h = 1e-5
    tensors = [(layer.weight, grads.weights[i]) for i, layer in enumerate(net.layers)]
    tensors += [(layer.bias, grads.biases[i]) for i, layer in enumerate(net.layers)]
    tensors.append((net.prototypes, grads.prototypes))
    for param, analytic in tensors:
        numeric = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            saved = param[idx]
            param[idx] = saved + h
            up = _loss(net, x, cfg, codes, views, batch).loss
            param[idx] = saved - h
            down = _loss(net, x, cfg, codes, views, batch).loss
            param[idx] = saved
            numeric[idx] = (up - down) / (2 * h)
        err = np.linalg.norm(numeric - analytic) / max(np.linalg.norm(numeric) + np.linalg.norm(analytic), 1e-12)
        assert err <= 1e-4, f"relative error {err} on a {param.shape} tensor"


@pytest.mark.parametrize("seed", range(50))
def test_checkpointed_backward_is_bit_identical(seed):
    rng = np.random.default_rng(seed)
    depths = tuple(int(d) for d in rng.integers(1, 3, size=3))
    spec = ModelSpec((4, 6, 5), depths, head_dims=(5, 3), n_prototypes=4)
    net = init_net(spec, 4, rng)
    x = rng.standard_normal((6, 4))
    grad_scores = rng.standard_normal((6, 4))
    full = engine.backward(net, engine.forward(net, x), grad_scores)

    n = net.n_layers
    n_boundaries = int(rng.integers(1, n))
    boundaries = sorted(rng.choice(np.arange(1, n), size=n_boundaries, replace=False))
    acts = engine.forward(net, x, Retain.at(boundaries))
    assert set(acts.layer_inputs) == {0, *boundaries}
    partial = engine.backward(net, acts, grad_scores)
    for i in range(n):
        np.testing.assert_array_equal(full.weights[i], partial.weights[i])
        np.testing.assert_array_equal(full.biases[i], partial.biases[i])
    np.testing.assert_array_equal(full.prototypes, partial.prototypes)


def test_backward_without_segment_start_fails(small_net, rng):
    acts = engine.forward(small_net, rng.standard_normal((3, small_net.input_dim)), Retain.at([2]))
    del acts.layer_inputs[2]
    with pytest.raises(StateError):
        engine.backward(small_net, acts, np.zeros((3, small_net.prototypes.shape[0])))


def test_retention_outside_network_is_rejected(small_net):
    with pytest.raises(InvalidArgumentError):
        engine.forward(small_net, np.zeros((1, small_net.input_dim)), Retain.at([small_net.n_layers]))


def test_param_vectors_rebuild_the_net(small_net):
    rebuilt = LayeredNet.from_param_vectors(small_net.layouts(), small_net.param_vectors())
    for a, b in zip(small_net.layers, rebuilt.layers):
        np.testing.assert_array_equal(a.weight, b.weight)
        np.testing.assert_array_equal(a.bias, b.bias)
        assert a.activation == b.activation
    np.testing.assert_array_equal(small_net.prototypes, rebuilt.prototypes)


def test_init_net_shapes(five_layer_spec):
    net = init_net(five_layer_spec, 6, np.random.default_rng(0))
    assert net.n_layers == 5
    assert [l.activation for l in net.layers] == ["relu"] * 4 + ["none"]
    np.testing.assert_allclose(np.linalg.norm(net.prototypes, axis=1), 1.0, rtol=1e-12)


def test_mismatched_layers_are_rejected():
    with pytest.raises(ShapeError):
        LayeredNet([DenseLayer(np.zeros((2, 3)), np.zeros(3)), DenseLayer(np.zeros((4, 2)), np.zeros(2))],
                   np.zeros((1, 2)))
