"""
Fully sharded data parallel training over the fabric.

Every parameter block (each dense layer, then the prototype matrix) is flattened,
padded to a multiple of the world size and split into equal rank shards. Parameters
are all-gathered just before use and released right after; gradients are
reduce-scattered; momentum lives only as shards.
"""
import inspect
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.ckptplan import CheckpointPlan
from core.engine import (LayerLayout, LayeredNet, Retain, head_backward, l2_normalize, layer_backward,
                         layer_forward, normalize_prototypes, score)
from core import engine
from core.errors import InvalidArgumentError, InvalidPlanError, ShapeError
from core.optim import (OptimConfig, dense_norms, distributed_norms, fold_sum, layer_lr, schedule_lr,
                        sgd_step)
from core.swav import SwavConfig, assemble_global, rank_rows, swav_loss_from_scores

LOGGER = logging.getLogger(__name__)


def ceil_div(n: int, d: int) -> int:
    return (n + d - 1) // d


def shard_bounds(full_length: int, world_size: int, rank: int) -> Tuple[int, int, int]:
    """(start, end, shard_length) of the real elements this rank owns"""
    shard_length = ceil_div(full_length, world_size)
    start = min(rank * shard_length, full_length)
    end = min(start + shard_length, full_length)
    return start, end, shard_length


def shard_vector(vector, world_size: int, rank: int) -> np.ndarray:
    start, end, shard_length = shard_bounds(vector.shape[0], world_size, rank)
    shard = np.zeros(shard_length, dtype=vector.dtype)
    shard[:end - start] = vector[start:end]
    return shard


def pad_to_world(vector, world_size: int) -> np.ndarray:
    padded = np.zeros(ceil_div(vector.shape[0], world_size) * world_size, dtype=vector.dtype)
    padded[:vector.shape[0]] = vector
    return padded


def unshard(shards: Sequence[np.ndarray], full_length: int) -> np.ndarray:
    return np.concatenate(shards)[:full_length].copy()


@dataclass
class LayerShard:
    params: np.ndarray
    momentum: np.ndarray
    full_length: int
    pad_length: int


@dataclass
class ShardedState:
    layouts: List[LayerLayout]
    shards: List[LayerShard]
    world_size: int
    rank: int
    step: int = 0

    @property
    def n_layers(self) -> int:
        """Dense layers only; the prototype block is the last shard"""
        return len(self.layouts) - 1


def make_layer_shard(params, momentum, world_size: int, rank: int) -> LayerShard:
    start, end, shard_length = shard_bounds(params.shape[0], world_size, rank)
    return LayerShard(shard_vector(params, world_size, rank), shard_vector(momentum, world_size, rank),
                      params.shape[0], shard_length - (end - start))


def shard_params(net: LayeredNet, world_size: int, momentum: Optional[Sequence[np.ndarray]] = None,
                 step: int = 0) -> List[ShardedState]:
    if world_size < 1:
        raise InvalidArgumentError(f"world_size must be >= 1, got {world_size}")
    layouts = net.layouts()
    vectors = net.param_vectors()
    if momentum is None:
        momentum = [np.zeros_like(v) for v in vectors]
    return [ShardedState(layouts, [make_layer_shard(v, m, world_size, rank)
                                   for v, m in zip(vectors, momentum)], world_size, rank, step)
            for rank in range(world_size)]


def consolidate(states: Sequence[ShardedState]) -> Tuple[LayeredNet, List[np.ndarray]]:
    """Dense net and momentum rebuilt from every rank's shards"""
    states = sorted(states, key=lambda s: s.rank)
    layouts = states[0].layouts
    params, momentum = [], []
    for i, layout in enumerate(layouts):
        params.append(unshard([s.shards[i].params for s in states], layout.numel))
        momentum.append(unshard([s.shards[i].momentum for s in states], layout.numel))
    return LayeredNet.from_param_vectors(layouts, params), momentum


@dataclass
class DenseTrainState:
    net: LayeredNet
    momentum: List[np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, net: LayeredNet) -> "DenseTrainState":
        return cls(net.copy(), [np.zeros_like(v) for v in net.param_vectors()], 0)


def validate_plan(plan: Optional[CheckpointPlan], n_layers: int) -> Retain:
    if plan is None:
        return Retain.all()
    if plan.n_layers != n_layers:
        raise InvalidPlanError(f"Plan covers {plan.n_layers} layers, network has {n_layers}")
    bad = [b for b in plan.boundaries if not 0 < b < n_layers]
    if bad:
        raise InvalidPlanError(f"Plan boundaries {bad} are outside (0, {n_layers})")
    return Retain.for_plan(plan)


def _gather(handle, state: ShardedState, layer: int):
    layout = state.layouts[layer]
    full = yield from handle.all_gather(state.shards[layer].params, layer=layer, tag="params")
    return layout.unflatten(full)


def _sweep(handle, state: ShardedState, layers: Sequence[int], prefetch: bool, body):
    """
    Gather each layer's full params, run `body(layer, weight, bias)`, release them.
    A body may itself be a generator when it issues collectives.
    """
    layers = list(layers)
    ready = {}
    for i, layer in enumerate(layers):
        if layer not in ready:
            ready[layer] = yield from _gather(handle, state, layer)
        if prefetch and i + 1 < len(layers):
            nxt = layers[i + 1]
            ready[nxt] = yield from _gather(handle, state, nxt)
        weight, bias = ready.pop(layer)
        work = body(layer, weight, bias)
        if inspect.isgenerator(work):
            yield from work
        handle.log_event("free", layer)


def fsdp_train_step(state: ShardedState, handle, microbatch, swav_cfg: SwavConfig, optim_cfg: OptimConfig,
                    plan: Optional[CheckpointPlan] = None, prefetch: bool = True):
    """
    One sharded training step for this rank's (views, batch, dim) microbatch.
    Generator: `loss, state = yield from fsdp_train_step(...)`.
    """
    n_layers = state.n_layers
    proto = n_layers
    retain = validate_plan(plan, n_layers)
    microbatch = np.asarray(microbatch)
    if microbatch.ndim != 3:
        raise ShapeError(f"Microbatch must be (views, batch, dim), got {microbatch.shape}")
    n_views, batch, _ = microbatch.shape
    handle.step = state.step
    lr = schedule_lr(state.step, optim_cfg.schedule)
    layouts = state.layouts

    inputs = {}
    head = {}
    flat_grads: List[Optional[np.ndarray]] = [None] * len(layouts)

    def forward_body(layer, weight, bias):
        if layer == proto:
            return head_body(weight)
        h = head["h"]
        if retain.keeps(layer):
            inputs[layer] = h
        head["h"] = layer_forward(weight, bias, layouts[layer].activation, h)
        return None

    def head_body(prototypes):
        y = head.pop("h")
        z, norms = l2_normalize(y)
        z_full = yield from handle.all_gather(z, layer=-1, tag="embeddings")
        per_rank = z_full.reshape(state.world_size, n_views, batch, -1)
        z_all = assemble_global(list(per_rank))
        result = swav_loss_from_scores(score(z_all, prototypes), swav_cfg)
        grad_scores = rank_rows(result.grad, state.rank, batch)
        grad_y, grad_prototypes = head_backward(z, norms, prototypes, grad_scores)
        head.update(loss=result.loss, y=y, grad=grad_y)
        flat_grads[proto] = yield from handle.reduce_scatter(
            pad_to_world(grad_prototypes.reshape(-1), state.world_size), layer=proto, tag="grads")

    head["h"] = microbatch.reshape(n_views * batch, -1)
    yield from _sweep(handle, state, list(range(n_layers)) + [proto], prefetch, forward_body)

    checkpointed = retain.boundaries is not None
    for start, end in reversed(retain.segments(n_layers)):
        seq = {start: inputs[start]}
        if checkpointed:
            def recompute_body(layer, weight, bias):
                seq[layer + 1] = layer_forward(weight, bias, layouts[layer].activation, seq[layer])

            yield from _sweep(handle, state, range(start, end), prefetch, recompute_body)
        else:
            seq.update({i: inputs[i] for i in range(start, end)})
            seq[end] = head["y"]

        def backward_body(layer, weight, bias):
            grad_in, grad_weight, grad_bias = layer_backward(
                weight, layouts[layer].activation, seq[layer], seq[layer + 1], head["grad"])
            head["grad"] = grad_in
            flat = layouts[layer].flatten(grad_weight, grad_bias)
            flat_grads[layer] = yield from handle.reduce_scatter(
                pad_to_world(flat, state.world_size), layer=layer, tag="grads")

        yield from _sweep(handle, state, range(end - 1, start - 1, -1), prefetch, backward_body)

    norms = yield from distributed_norms([s.params for s in state.shards], flat_grads, handle)
    for i, shard in enumerate(state.shards):
        lr_eff = layer_lr(lr, norms[i][0], norms[i][1], optim_cfg.larc)
        shard.params, shard.momentum = sgd_step(shard.params, flat_grads[i], shard.momentum, lr_eff,
                                                optim_cfg.weight_decay, optim_cfg.momentum)

    full = yield from handle.all_gather(state.shards[proto].params, layer=proto, tag="renorm")
    prototypes, _ = layouts[proto].unflatten(full)
    renormed = normalize_prototypes(prototypes).reshape(-1)
    state.shards[proto].params = shard_vector(renormed, state.world_size, state.rank)
    handle.log_event("free", proto)

    state.step += 1
    return head["loss"], state


def ddp_baseline_step(train_state: DenseTrainState, microbatches: Sequence[np.ndarray], swav_cfg: SwavConfig,
                      optim_cfg: OptimConfig, plan: Optional[CheckpointPlan] = None,
                      fold_order: Optional[Sequence[int]] = None):
    """Dense oracle: per-microbatch gradients folded in virtual-rank order, then the same update"""
    net = train_state.net
    world_size = len(microbatches)
    retain = validate_plan(plan, net.n_layers)
    n_views, batch, _ = np.asarray(microbatches[0]).shape
    lr = schedule_lr(train_state.step, optim_cfg.schedule)

    acts = [engine.forward(net, np.asarray(mb).reshape(n_views * batch, -1), retain) for mb in microbatches]
    z_all = assemble_global([a.z.reshape(n_views, batch, -1) for a in acts])
    result = swav_loss_from_scores(score(z_all, net.prototypes), swav_cfg)
    layouts = net.layouts()
    per_rank = [engine.backward(net, a, rank_rows(result.grad, r, batch)).vectors(layouts)
                for r, a in enumerate(acts)]
    order = list(fold_order) if fold_order is not None else list(range(world_size))
    grads = [fold_sum([per_rank[r][i] for r in order]) for i in range(len(layouts))]

    params = net.param_vectors()
    norms = dense_norms(params, grads, world_size)
    new_params, new_momentum = [], []
    for i in range(len(layouts)):
        lr_eff = layer_lr(lr, norms[i][0], norms[i][1], optim_cfg.larc)
        p, m = sgd_step(params[i], grads[i], train_state.momentum[i], lr_eff,
                        optim_cfg.weight_decay, optim_cfg.momentum)
        new_params.append(p)
        new_momentum.append(m)
    prototypes, _ = layouts[-1].unflatten(new_params[-1])
    new_params[-1] = normalize_prototypes(prototypes).reshape(-1)

    train_state.net = LayeredNet.from_param_vectors(layouts, new_params)
    train_state.momentum = new_momentum
    train_state.step += 1
    return result.loss, train_state


def peak_unsharded(events: Sequence[dict]) -> int:
    """Most full parameter blocks held at once, from one rank's event log"""
    live, peak = 0, 0
    for event in events:
        if event["op"] == "all_gather" and event["layer"] >= 0:
            live += 1
            peak = max(peak, live)
        elif event["op"] == "free":
            live -= 1
    return peak


@dataclass(frozen=True)
class ScheduleEvent:
    kind: str
    layer: int
    time: float
    lane: str


@dataclass
class ScheduleSim:
    events: List[ScheduleEvent] = field(default_factory=list)
    makespan: float = 0.0

    def to_dict(self) -> dict:
        return {"makespan": self.makespan,
                "events": [{"kind": e.kind, "layer": e.layer, "time": e.time, "lane": e.lane}
                           for e in self.events]}


def simulate_schedule(comm_costs: Sequence[float], compute_costs: Sequence[float], prefetch: bool,
                      fp16_params: bool = False) -> ScheduleSim:
    """
    Forward-pass timeline on two lanes. Serial: gather then compute, layer by layer.
    Prefetch: gathers run back to back; compute(l) waits for its gather and for compute(l-1).
    """
    if len(comm_costs) != len(compute_costs):
        raise InvalidArgumentError(f"{len(comm_costs)} comm costs but {len(compute_costs)} compute costs")
    if any(c < 0 or not math.isfinite(c) for c in list(comm_costs) + list(compute_costs)):
        raise InvalidArgumentError("Costs must be finite and >= 0")
    comm = [c / 2 if fp16_params else c for c in comm_costs]
    sim = ScheduleSim()
    gather_end, compute_end = 0.0, 0.0
    for layer, (c, f) in enumerate(zip(comm, compute_costs)):
        gather_start = gather_end if prefetch else compute_end
        gather_end = gather_start + c
        compute_start = max(gather_end, compute_end)
        compute_end = compute_start + f
        sim.events += [ScheduleEvent("AllGatherStart", layer, gather_start, "comm"),
                       ScheduleEvent("AllGatherEnd", layer, gather_end, "comm"),
                       ScheduleEvent("ComputeStart", layer, compute_start, "compute"),
                       ScheduleEvent("ComputeEnd", layer, compute_end, "compute")]
    sim.events.sort(key=lambda e: e.time)
    sim.makespan = compute_end
    return sim
