import numpy as np
import pytest

from core import engine
from core.engine import DenseLayer, LayeredNet
from core.errors import InvalidArgumentError, InvalidConfigError
from core.probe import ProbeConfig, extract_features, split_indices, train_probe


def test_identity_net_features_are_normalized_inputs(rng):
    net = LayeredNet([DenseLayer(np.eye(3), np.zeros(3), "none")], np.eye(3))
    x = rng.standard_normal((6, 3))
    features = extract_features(net, x)
    np.testing.assert_allclose(features, x / np.linalg.norm(x, axis=1, keepdims=True), rtol=1e-10)


def test_features_match_per_sample_forward(small_net, rng):
    x = rng.standard_normal((7, small_net.input_dim))
    features = extract_features(small_net, x)
    for i in range(x.shape[0]):
        np.testing.assert_allclose(features[i], engine.forward(small_net, x[i:i + 1]).z[0], rtol=1e-12, atol=1e-15)


def test_probe_leaves_the_trunk_frozen(small_net, rng):
    before = [v.copy() for v in small_net.param_vectors()]
    x = rng.standard_normal((40, small_net.input_dim))
    train_probe(extract_features(small_net, x), np.arange(40) % 2, ProbeConfig(epochs=3, step_milestones=(2,)))
    for a, b in zip(before, small_net.param_vectors()):
        np.testing.assert_array_equal(a, b)


def test_random_labels_stay_near_chance():
    rng = np.random.default_rng(0)
    features = rng.standard_normal((2000, 8))
    labels = rng.integers(0, 4, size=2000)
    result = train_probe(features, labels, ProbeConfig())
    assert abs(result.top1 - 0.25) <= 0.08


def test_separable_data_and_loss_curve():
    rng = np.random.default_rng(1)
    labels = np.arange(400) % 4
    features = np.eye(4)[labels] * 3.0 + 0.1 * rng.standard_normal((400, 4))
    result = train_probe(features, labels, ProbeConfig(epochs=10, step_milestones=(5,)))
    assert result.top1 == 1.0
    assert len(result.epoch_losses) == 10
    assert result.epoch_losses[-1] < result.epoch_losses[0]
    assert result.n_train + result.n_test == 400 and result.n_test == 80
    assert set(result.to_dict()) == {"top1", "n_train", "n_test"}


@pytest.mark.parametrize("cfg", [ProbeConfig(epochs=10, step_milestones=(5,)), ProbeConfig()],
                         ids=["short", "default"])
@pytest.mark.parametrize("seed", range(5))
def test_separable_loss_never_rises_between_epochs(cfg, seed):
    rng = np.random.default_rng(seed)
    labels = np.arange(400) % 4
    features = np.eye(4)[labels] * 3.0 + 0.1 * rng.standard_normal((400, 4))
    losses = train_probe(features, labels, cfg).epoch_losses
    rises = np.diff(losses)
    assert np.all(rises <= 1e-9), f"loss rose by {rises.max()} for seed {seed}"


def test_split_is_deterministic_and_disjoint():
    train, test = split_indices(50, 0.2, seed=3)
    again_train, again_test = split_indices(50, 0.2, seed=3)
    np.testing.assert_array_equal(train, again_train)
    np.testing.assert_array_equal(test, again_test)
    assert len(test) == 10 and not set(train) & set(test)


def test_step_decay():
    cfg = ProbeConfig(lr=1.0, step_milestones=(8, 16, 24), gamma=0.1)
    assert [cfg.lr_at(e) for e in (0, 7, 8, 16, 24)] == pytest.approx([1.0, 1.0, 0.1, 0.01, 0.001])


def test_single_class_is_rejected():
    with pytest.raises(InvalidArgumentError):
        train_probe(np.zeros((10, 2)), np.zeros(10, dtype=int))


def test_bad_probe_config():
    with pytest.raises(InvalidConfigError):
        ProbeConfig(epochs=5, step_milestones=(8,))
    with pytest.raises(InvalidConfigError):
        ProbeConfig(test_fraction=1.0)
