"""
SGD with momentum, LARC trust ratios over sharded layers, warmup + cosine learning rate
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.errors import InvalidArgumentError, InvalidConfigError, ProtocolError, ShapeError

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class LarcConfig:
    eta: float = 0.02
    beta: float = 1e-5
    clip_fallback: float = 1.0

    def __post_init__(self):
        if not self.eta > 0:
            raise InvalidConfigError(f"larc eta must be > 0, got {self.eta}")
        if self.beta < 0:
            raise InvalidConfigError(f"larc beta must be >= 0, got {self.beta}")


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    peak_lr: float
    final_lr: float
    warmup_iters: int
    total_iters: int

    def __post_init__(self):
        if not 0 <= self.warmup_iters < self.total_iters:
            raise InvalidConfigError(
                f"Need 0 <= warmup_iters < total_iters, got {self.warmup_iters} and {self.total_iters}")
        if self.peak_lr < self.base_lr:
            raise InvalidConfigError(f"peak_lr {self.peak_lr} is below base_lr {self.base_lr}")


@dataclass(frozen=True)
class OptimConfig:
    schedule: LrSchedule
    momentum: float = 0.9
    weight_decay: float = 1e-5
    larc: Optional[LarcConfig] = field(default_factory=LarcConfig)


def schedule_lr(iteration: int, sched: LrSchedule) -> float:
    """Linear warmup from base to peak, then cosine decay from peak to final"""
    if not 0 <= iteration <= sched.total_iters:
        raise InvalidArgumentError(f"Iteration {iteration} is outside [0, {sched.total_iters}]")
    if iteration < sched.warmup_iters:
        t = iteration / sched.warmup_iters
        return sched.base_lr * (1.0 - t) + sched.peak_lr * t
    c = 0.5 * (1.0 + math.cos(math.pi * (iteration - sched.warmup_iters)
                              / (sched.total_iters - sched.warmup_iters)))
    return sched.peak_lr * c + sched.final_lr * (1.0 - c)


def larc_coeff(w_norm: float, g_norm: float, cfg: LarcConfig) -> float:
    if w_norm < 0 or g_norm < 0:
        raise InvalidArgumentError(f"Norms must be >= 0, got {w_norm} and {g_norm}")
    denom = g_norm + w_norm * cfg.beta
    if w_norm == 0 or denom == 0:
        LOGGER.debug("LARC fallback (w_norm=%s, g_norm=%s)", w_norm, g_norm)
        return cfg.clip_fallback
    return cfg.eta * w_norm / denom


def sgd_step(params, grads, momentum, lr_eff: float, weight_decay: float,
             momentum_coef: float) -> Tuple[np.ndarray, np.ndarray]:
    """g <- g + wd*w; v <- mu*v + g; w <- w - lr*v. Inputs are not modified."""
    if params.shape != grads.shape or params.shape != momentum.shape:
        raise ShapeError(f"Shape mismatch: params {params.shape}, grads {grads.shape}, "
                         f"momentum {momentum.shape}")
    g = grads + weight_decay * params
    v = momentum_coef * momentum + g
    return params - lr_eff * v, v


def sum_squares(vector) -> float:
    return float(np.sum(np.square(vector)))


def distributed_norms(weight_shards: Sequence[np.ndarray], grad_shards: Sequence[np.ndarray], handle):
    """
    Per-layer (||w||, ||g||) over sharded layers with one batched all-reduce of 2L scalars.
    Generator: call as `norms = yield from distributed_norms(...)` inside a rank program.
    """
    n_layers = len(weight_shards)
    if len(grad_shards) != n_layers:
        raise ProtocolError(f"{n_layers} weight shards but {len(grad_shards)} gradient shards")
    local = np.array([sum_squares(w) for w in weight_shards] + [sum_squares(g) for g in grad_shards],
                     dtype=np.float64)
    total = yield from handle.all_reduce(local, layer=-1, tag="norms")
    if total.shape[0] != 2 * n_layers:
        raise ProtocolError(f"Norm payload has length {total.shape[0]}, expected {2 * n_layers}")
    return [(math.sqrt(total[i]), math.sqrt(total[n_layers + i])) for i in range(n_layers)]


def fold_sum(values: Sequence) -> np.ndarray:
    """Ascending-order left fold, the reduction order every collective uses"""
    acc = np.array(values[0], dtype=np.float64, copy=True)
    for value in values[1:]:
        acc = acc + value
    return acc


def sharded_sumsq(vector, world_size: int) -> float:
    """Sum of squares of a dense vector computed shard by shard and folded in rank order"""
    from core.fsdp import shard_vector
    parts = [np.array([sum_squares(shard_vector(vector, world_size, r))]) for r in range(world_size)]
    return float(fold_sum(parts)[0])


def dense_norms(weights: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                world_size: int) -> List[Tuple[float, float]]:
    """Oracle for distributed_norms on consolidated vectors"""
    return [(math.sqrt(sharded_sumsq(w, world_size)), math.sqrt(sharded_sumsq(g, world_size)))
            for w, g in zip(weights, grads)]


def layer_lr(base_lr: float, w_norm: float, g_norm: float, larc: Optional[LarcConfig]) -> float:
    if larc is None:
        return base_lr
    return base_lr * larc_coeff(w_norm, g_norm, larc)
