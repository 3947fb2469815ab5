"""
Training Run - SwAV pretraining with sharded data parallelism over the fabric
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from core.ckptplan import CheckpointPlan, auto_plan, simulate_peak
from core.ckptstore import load_sharded, save_sharded
from core.engine import LayeredNet, init_net
from core.errors import NumericError
from core.fabric import Fabric
from core.fsdp import ShardedState, consolidate, fsdp_train_step, shard_params
from core.netspec import activation_profile
from core.optim import schedule_lr
from core.run_config import RunConfig
from core.swav import microbatch_views, synth_dataset

LOGGER = logging.getLogger(__name__)

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class TrainingResult:
    states: List[ShardedState]
    metrics: List[dict] = field(default_factory=list)

    def net(self) -> LayeredNet:
        return consolidate(self.states)[0]


def make_dataset(config: RunConfig):
    ds = config.dataset()
    return synth_dataset(ds.n_clusters, ds.dim, ds.n_samples, ds.spread, np.random.default_rng([config.seed, 0]))


class TrainingRun:
    """Owns dataset, topology, checkpoint plan and fabric for one training run"""

    def __init__(self, config: RunConfig, mode: str = "sim", timeout: float = 60.0,
                 on_metrics: Optional[Callable[[dict], None]] = None):
        self.config = config
        self.on_metrics = on_metrics
        self.spec = config.model_spec()
        self.swav_cfg = config.swav()
        self.optim_cfg = config.optim()
        self.dtype = DTYPES[config.dtype]
        self.samples, self.labels = make_dataset(config)
        rows = config.batch_per_rank * self.swav_cfg.n_views
        self.profile = activation_profile(self.spec, rows, np.dtype(self.dtype).itemsize)
        self.plan: Optional[CheckpointPlan] = None
        if config.memory_budget_bytes is not None:
            self.plan = auto_plan(self.profile, config.memory_budget_bytes)
        self.peak_modeled_mem = simulate_peak(self.profile, self.plan)
        self.fabric = Fabric(config.world_size, mode, timeout)
        LOGGER.info("Model stages %s x %s, head %s, %d layers, plan %s",
                    self.spec.stage_widths, self.spec.stage_depths, self.spec.head_dims,
                    self.spec.n_layers, self.plan.boundaries if self.plan else "none")

    def initial_net(self) -> LayeredNet:
        return init_net(self.spec, self.config.dim, np.random.default_rng([self.config.seed, 1]), self.dtype)

    def initial_states(self) -> List[ShardedState]:
        return shard_params(self.initial_net(), self.config.world_size)

    def run(self, resume_from=None, stop_at: Optional[int] = None) -> TrainingResult:
        """Train until total_iters (or `stop_at`), optionally resuming from a sharded checkpoint"""
        cfg = self.config
        world = cfg.world_size
        if resume_from is not None:
            states = [load_sharded(resume_from, rank, world) for rank in range(world)]
            LOGGER.info("Resuming from %s at step %d", resume_from, states[0].step)
        else:
            states = self.initial_states()
        last = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
        metrics: List[dict] = []
        config_hash = cfg.config_hash()

        def program(handle):
            state = states[handle.rank]
            while state.step < last:
                iteration = state.step
                microbatch = microbatch_views(self.samples, iteration, handle.rank, world, cfg.batch_per_rank,
                                              self.swav_cfg, cfg.seed).astype(self.dtype)
                loss, state = yield from fsdp_train_step(state, handle, microbatch, self.swav_cfg, self.optim_cfg,
                                                         self.plan, cfg.prefetch)
                if not math.isfinite(loss):
                    raise NumericError(f"Loss became {loss} at iteration {iteration}")
                if handle.rank == 0:
                    self._emit(metrics, {"iter": iteration,
                                         "lr": schedule_lr(iteration, self.optim_cfg.schedule),
                                         "loss": loss, "peak_modeled_mem": self.peak_modeled_mem})
                if cfg.checkpoint_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                    yield from handle.barrier(tag="checkpoint")
                    save_sharded(state, state.step, cfg.checkpoint_dir, cfg.seed, config_hash)
                    yield from handle.barrier(tag="checkpoint")
            return state

        self.fabric.reset_events()
        final = self.fabric.run(program)
        return TrainingResult(final, metrics)

    def _emit(self, metrics: List[dict], record: dict):
        metrics.append(record)
        if record["iter"] % 50 == 0:
            LOGGER.info("iter %d  lr %.5f  loss %.6f", record["iter"], record["lr"], record["loss"])
        if self.on_metrics is not None:
            self.on_metrics(record)
