"""
Linear probe on frozen embeddings: multinomial logistic regression trained with
step-decayed SGD, scored by top-1 accuracy on a held-out split
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from core import engine
from core.engine import LayeredNet
from core.errors import InvalidArgumentError, InvalidConfigError
from core.swav import log_softmax

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 28
    lr: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9
    step_milestones: Tuple[int, ...] = (8, 16, 24)
    gamma: float = 0.1
    batch_size: Optional[int] = 32
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidConfigError(f"Probe epochs must be >= 1, got {self.epochs}")
        milestones = list(self.step_milestones)
        if milestones != sorted(milestones) or any(not 1 <= m <= self.epochs for m in milestones):
            raise InvalidConfigError(f"Milestones {milestones} must be sorted within [1, {self.epochs}]")
        if not 0 < self.test_fraction < 1:
            raise InvalidConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")

    def lr_at(self, epoch: int) -> float:
        decays = sum(1 for m in self.step_milestones if epoch >= m)
        return self.lr * self.gamma ** decays


@dataclass
class ProbeResult:
    weights: np.ndarray
    bias: np.ndarray
    top1: float
    n_train: int
    n_test: int
    epoch_losses: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"top1": self.top1, "n_train": self.n_train, "n_test": self.n_test}

    def predict(self, features) -> np.ndarray:
        return np.argmax(features @ self.weights + self.bias, axis=1)


def extract_features(net: LayeredNet, samples) -> np.ndarray:
    """Normalized pre-prototype embeddings; the net is only read"""
    return engine.forward(net, np.asarray(samples)).z


def split_indices(n: int, test_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def _loss_and_grads(weights, bias, x, onehot, weight_decay):
    log_probs = log_softmax(x @ weights + bias)
    batch = x.shape[0]
    loss = -float(np.sum(onehot * log_probs)) / batch + 0.5 * weight_decay * float(np.sum(weights * weights))
    dlogits = (np.exp(log_probs) - onehot) / batch
    return loss, x.T @ dlogits + weight_decay * weights, dlogits.sum(axis=0)


def train_probe(features, labels, cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.shape[0] < 2:
        raise InvalidArgumentError(f"Probe needs >= 2 classes, got {classes.shape[0]}")
    class_index = np.searchsorted(classes, labels)
    n_classes = classes.shape[0]
    train_idx, test_idx = split_indices(features.shape[0], cfg.test_fraction, cfg.seed)
    x_train, y_train = features[train_idx], class_index[train_idx]
    onehot = np.eye(n_classes)[y_train]

    weights = np.zeros((features.shape[1], n_classes))
    bias = np.zeros(n_classes)
    vel_w, vel_b = np.zeros_like(weights), np.zeros_like(bias)
    rng = np.random.default_rng(cfg.seed)
    batch_size = cfg.batch_size or x_train.shape[0]
    epoch_losses = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(x_train.shape[0]) if cfg.batch_size else np.arange(x_train.shape[0])
        for start in range(0, x_train.shape[0], batch_size):
            batch = order[start:start + batch_size]
            _, grad_w, grad_b = _loss_and_grads(weights, bias, x_train[batch], onehot[batch], cfg.weight_decay)
            vel_w = cfg.momentum * vel_w + grad_w
            vel_b = cfg.momentum * vel_b + grad_b
            weights = weights - lr * vel_w
            bias = bias - lr * vel_b
        loss, _, _ = _loss_and_grads(weights, bias, x_train, onehot, cfg.weight_decay)
        epoch_losses.append(loss)
        LOGGER.debug("Probe epoch %d: lr %.2e, train loss %.6f", epoch + 1, lr, loss)

    result = ProbeResult(weights, bias, 0.0, int(train_idx.shape[0]), int(test_idx.shape[0]), epoch_losses)
    if test_idx.shape[0]:
        predicted = result.predict(features[test_idx])
        result.top1 = float(np.mean(predicted == class_index[test_idx]))
    return result
