import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from core.engine import init_net  # noqa: E402
from core.netspec import ModelSpec  # noqa: E402
from core.optim import LarcConfig, LrSchedule, OptimConfig  # noqa: E402
from core.swav import SwavConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def five_layer_spec():
    # block widths [8, 8, 12, 12] then one head layer of width 6
    return ModelSpec(stage_widths=(8, 12), stage_depths=(2, 2), head_dims=(12, 6), n_prototypes=4)


@pytest.fixture
def small_net(five_layer_spec):
    return init_net(five_layer_spec, 6, np.random.default_rng(7))


@pytest.fixture
def small_swav():
    return SwavConfig(n_prototypes=4, n_global_views=2, n_local_views=1)


@pytest.fixture
def small_optim():
    return OptimConfig(LrSchedule(0.05, 0.2, 0.001, 5, 60), momentum=0.9, weight_decay=1e-5,
                       larc=LarcConfig(eta=0.02, beta=1e-5))


def tiny_config(**overrides) -> dict:
    """Run config small enough for a few seconds of training"""
    config = {
        "w0": 16, "wa": 0, "wm": 1, "depth": 2, "group_width": 8,
        "scale_divisor": 2,
        "depth_cap": 2,
        "head_dims": [8, 6],
        "prototypes": 4,
        "local_views": 1,
        "world_size": 2,
        "batch_per_rank": 4,
        "warmup_iters": 2,
        "total_iters": 6,
        "dim": 6,
        "n_samples": 64,
        "seed": 3,
    }
    config.update(overrides)
    return config


@pytest.fixture
def write_config(tmp_path):
    def write(name="run.json", **overrides):
        path = tmp_path / name
        path.write_text(json.dumps(tiny_config(**overrides), indent=2), encoding="utf-8")
        return path
    return write
