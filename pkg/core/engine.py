"""
Dense layered network: forward and manual reverse pass with layer granularity
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import InvalidArgumentError, ShapeError, StateError
from core.netspec import ModelSpec

LOGGER = logging.getLogger(__name__)

NORM_EPS = 1e-12
ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class LayerLayout:
    """Flat layout of one shardable parameter block: weight rows x cols, then optional bias"""
    rows: int
    cols: int
    bias: bool = True
    activation: str = "none"

    @property
    def numel(self) -> int:
        return self.rows * self.cols + (self.cols if self.bias else 0)

    def flatten(self, weight, bias=None) -> np.ndarray:
        if weight.shape != (self.rows, self.cols):
            raise ShapeError(f"Expected weight {(self.rows, self.cols)}, got {weight.shape}")
        if not self.bias:
            return np.ascontiguousarray(weight).reshape(-1).copy()
        return np.concatenate([weight.reshape(-1), bias.reshape(-1)])

    def unflatten(self, flat) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        if flat.shape[0] < self.numel:
            raise ShapeError(f"Flat vector of length {flat.shape[0]} is shorter than layout {self.numel}")
        split = self.rows * self.cols
        weight = flat[:split].reshape(self.rows, self.cols).copy()
        bias = flat[split:self.numel].copy() if self.bias else None
        return weight, bias

    def to_dict(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "bias": self.bias, "activation": self.activation}

    @classmethod
    def from_dict(cls, data: dict) -> "LayerLayout":
        return cls(int(data["rows"]), int(data["cols"]), bool(data["bias"]), str(data["activation"]))


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"Unknown activation '{self.activation}'")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"Bias {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def layout(self) -> LayerLayout:
        rows, cols = self.weight.shape
        return LayerLayout(rows, cols, True, self.activation)


@dataclass
class LayeredNet:
    layers: List[DenseLayer]
    prototypes: np.ndarray

    def __post_init__(self):
        for i in range(1, len(self.layers)):
            if self.layers[i - 1].weight.shape[1] != self.layers[i].weight.shape[0]:
                raise ShapeError(f"Layer {i} input {self.layers[i].weight.shape[0]} does not "
                                 f"chain with layer {i - 1} output {self.layers[i - 1].weight.shape[1]}")
        if self.layers and self.prototypes.shape[1] != self.layers[-1].weight.shape[1]:
            raise ShapeError(f"Prototype dim {self.prototypes.shape[1]} does not match "
                             f"embedding dim {self.layers[-1].weight.shape[1]}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    def layouts(self) -> List[LayerLayout]:
        """Every shardable block in order: the dense layers, then the prototype matrix"""
        k, d = self.prototypes.shape
        return [layer.layout for layer in self.layers] + [LayerLayout(k, d, False, "none")]

    def param_vectors(self) -> List[np.ndarray]:
        vectors = [layer.layout.flatten(layer.weight, layer.bias) for layer in self.layers]
        vectors.append(self.prototypes.reshape(-1).copy())
        return vectors

    @classmethod
    def from_param_vectors(cls, layouts: Sequence[LayerLayout], vectors: Sequence[np.ndarray]) -> "LayeredNet":
        if len(layouts) != len(vectors) or len(layouts) < 2:
            raise ShapeError("Need one vector per layout and at least one layer plus prototypes")
        layers = []
        for layout, flat in zip(layouts[:-1], vectors[:-1]):
            weight, bias = layout.unflatten(flat)
            layers.append(DenseLayer(weight, bias, layout.activation))
        prototypes, _ = layouts[-1].unflatten(vectors[-1])
        return cls(layers, prototypes)

    def copy(self) -> "LayeredNet":
        return LayeredNet([DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
                          self.prototypes.copy())


def init_net(spec: ModelSpec, input_dim: int, rng: np.random.Generator, dtype=np.float64) -> LayeredNet:
    """He-normal weights, zero biases, unit-norm prototype rows; last layer is linear"""
    layers = []
    fan_in = input_dim
    widths = spec.layer_widths
    for i, width in enumerate(widths):
        weight = (rng.standard_normal((fan_in, width)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        activation = "none" if i == len(widths) - 1 else "relu"
        layers.append(DenseLayer(weight, np.zeros(width, dtype=dtype), activation))
        fan_in = width
    prototypes = rng.standard_normal((spec.n_prototypes, spec.embed_dim)).astype(dtype)
    return LayeredNet(layers, normalize_prototypes(prototypes))


@dataclass(frozen=True)
class Retain:
    """Which layer inputs a forward pass keeps. None means every layer."""
    boundaries: Optional[Tuple[int, ...]] = None

    @classmethod
    def all(cls) -> "Retain":
        return cls(None)

    @classmethod
    def at(cls, boundaries: Sequence[int]) -> "Retain":
        return cls(tuple(sorted(set(int(b) for b in boundaries) | {0})))

    @classmethod
    def for_plan(cls, plan) -> "Retain":
        if plan is None or plan.n_segments <= 1:
            return cls.all()
        return cls.at(plan.boundaries)

    def keeps(self, layer: int) -> bool:
        return self.boundaries is None or layer in self.boundaries

    def segments(self, n_layers: int) -> List[Tuple[int, int]]:
        if self.boundaries is None:
            return [(0, n_layers)]
        starts = [b for b in self.boundaries if b < n_layers]
        ends = starts[1:] + [n_layers]
        return list(zip(starts, ends))

    def validate(self, n_layers: int):
        if self.boundaries is None:
            return
        bad = [b for b in self.boundaries if not 0 <= b < n_layers]
        if bad:
            raise InvalidArgumentError(f"Retention boundaries {bad} are outside [0, {n_layers})")


@dataclass
class BatchActivations:
    layer_inputs: Dict[int, np.ndarray]
    output: np.ndarray
    norms: np.ndarray
    z: np.ndarray
    scores: np.ndarray
    retain: Retain = field(default_factory=Retain.all)


@dataclass
class NetGradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    prototypes: np.ndarray

    def vectors(self, layouts: Sequence[LayerLayout]) -> List[np.ndarray]:
        vectors = [layout.flatten(w, b) for layout, w, b in zip(layouts, self.weights, self.biases)]
        vectors.append(self.prototypes.reshape(-1).copy())
        return vectors


def layer_forward(weight, bias, activation, x) -> np.ndarray:
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"Input dim {x.shape[-1]} does not match layer input {weight.shape[0]}")
    pre = x @ weight + bias
    if activation == "relu":
        return np.maximum(pre, 0.0)
    return pre


def layer_backward(weight, activation, x, out, grad_out) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_input, grad_weight, grad_bias) for out = act(x @ W + b)"""
    if activation == "relu":
        grad_pre = np.where(out > 0, grad_out, 0.0)
    else:
        grad_pre = grad_out
    grad_weight = x.T @ grad_pre
    grad_bias = grad_pre.sum(axis=0)
    grad_input = grad_pre @ weight.T
    return grad_input, grad_weight, grad_bias


def l2_normalize(y) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.sum(y * y, axis=-1, keepdims=True) + NORM_EPS)
    return y / norms, norms


def l2_normalize_backward(z, norms, grad_z) -> np.ndarray:
    return (grad_z - z * np.sum(grad_z * z, axis=-1, keepdims=True)) / norms


def score(z, prototypes) -> np.ndarray:
    return z @ prototypes.T


def head_backward(z, norms, prototypes, grad_scores) -> Tuple[np.ndarray, np.ndarray]:
    """Scores back to (grad on trunk output, grad on prototypes); rows of z and grad_scores align"""
    if grad_scores.shape != (z.shape[0], prototypes.shape[0]):
        raise ShapeError(f"Score gradient {grad_scores.shape} does not match "
                         f"{(z.shape[0], prototypes.shape[0])}")
    grad_z = grad_scores @ prototypes
    grad_prototypes = grad_scores.T @ z
    return l2_normalize_backward(z, norms, grad_z), grad_prototypes


def normalize_prototypes(prototypes) -> np.ndarray:
    norms = np.sqrt(np.sum(prototypes * prototypes, axis=1, keepdims=True))
    if np.any(norms == 0):
        LOGGER.warning("Zero prototype row left unnormalized")
        norms = np.where(norms == 0, 1.0, norms)
    return prototypes / norms


def forward(net: LayeredNet, x, retain: Optional[Retain] = None) -> BatchActivations:
    """Trunk, L2 normalization and prototype scores for a (rows x input_dim) batch"""
    retain = retain or Retain.all()
    retain.validate(net.n_layers)
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"Expected a (batch, {net.input_dim}) input, got {x.shape}")
    inputs = {}
    h = x
    for i, layer in enumerate(net.layers):
        if retain.keeps(i):
            inputs[i] = h
        h = layer_forward(layer.weight, layer.bias, layer.activation, h)
    z, norms = l2_normalize(h)
    return BatchActivations(inputs, h, norms, z, score(z, net.prototypes), retain)


def _segment_inputs(net: LayeredNet, acts: BatchActivations, start: int, end: int) -> List[np.ndarray]:
    """Inputs of layers start..end-1 plus the segment output, recomputed when not retained"""
    if start not in acts.layer_inputs:
        raise StateError(f"Activation for layer {start} was not retained and cannot be recomputed")
    seq = [acts.layer_inputs[start]]
    for i in range(start, end):
        if (i + 1) in acts.layer_inputs:
            seq.append(acts.layer_inputs[i + 1])
            continue
        if i + 1 == net.n_layers:
            seq.append(acts.output)
            continue
        layer = net.layers[i]
        seq.append(layer_forward(layer.weight, layer.bias, layer.activation, seq[-1]))
    return seq


def backward(net: LayeredNet, acts: BatchActivations, grad_scores) -> NetGradients:
    """Reverse pass; segments whose inner activations were dropped are re-forwarded"""
    grad, grad_prototypes = head_backward(acts.z, acts.norms, net.prototypes, grad_scores)
    n = net.n_layers
    grad_weights: List[Optional[np.ndarray]] = [None] * n
    grad_biases: List[Optional[np.ndarray]] = [None] * n
    for start, end in reversed(acts.retain.segments(n)):
        seq = _segment_inputs(net, acts, start, end)
        for i in range(end - 1, start - 1, -1):
            layer = net.layers[i]
            grad, grad_weights[i], grad_biases[i] = layer_backward(
                layer.weight, layer.activation, seq[i - start], seq[i - start + 1], grad)
    return NetGradients(grad_weights, grad_biases, grad_prototypes)
