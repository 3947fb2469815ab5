"""End-to-end checks of the numbered acceptance criteria not already covered by a module suite."""
import math
import time

import numpy as np
import pytest

from conftest import tiny_config
from core.ckptstore import consolidate_to_sliced, load_sliced
from core.engine import forward, init_net
from core.fsdp import consolidate
from core.netspec import ModelSpec, RegnetConfig, generate_widths
from core.probe import extract_features, train_probe
from core.run_config import RunConfig
from core.trainer import TrainingRun, make_dataset
from test_fsdp import assert_same, train_both


def test_width_generation_is_fast():
    start = time.perf_counter()
    widths, depths = generate_widths(RegnetConfig(456, 160.83, 2.52, 27, 264))
    assert (widths, depths) == ([528, 1056, 2904, 7392], [2, 7, 17, 1])
    assert time.perf_counter() - start < 0.05


@pytest.mark.parametrize("world", [1, 2, 4])
def test_fifty_sharded_steps_match_dense(small_swav, small_optim, world):
    spec = ModelSpec((8, 12), (2, 2), head_dims=(12, 6), n_prototypes=4)
    net = init_net(spec, 6, np.random.default_rng(world))
    final, dense, losses, dense_losses, _ = train_both(net, world, small_swav, small_optim, steps=50)
    assert losses == dense_losses
    assert_same(final, dense)


def test_resume_matches_uninterrupted_run(tmp_path):
    config = RunConfig.from_dict(tiny_config(total_iters=10, warmup_iters=3))
    uninterrupted = TrainingRun(config).run()

    interrupted = RunConfig.from_dict(tiny_config(total_iters=10, warmup_iters=3, checkpoint_every=5,
                                                  checkpoint_dir=str(tmp_path / "shards")))
    first = TrainingRun(interrupted).run(stop_at=5)
    assert all(s.step == 5 for s in first.states)
    resumed = TrainingRun(interrupted).run(resume_from=tmp_path / "shards")
    assert [m["iter"] for m in resumed.metrics] == list(range(5, 10))
    assert resumed.metrics == uninterrupted.metrics[5:]

    a, mom_a = consolidate(uninterrupted.states)
    b, mom_b = consolidate(resumed.states)
    for x, y in zip(a.param_vectors() + mom_a, b.param_vectors() + mom_b):
        np.testing.assert_array_equal(x, y)


def test_sliced_checkpoint_forward_on_any_world(tmp_path):
    config = RunConfig.from_dict(tiny_config(checkpoint_every=6, checkpoint_dir=str(tmp_path / "shards")))
    result = TrainingRun(config).run()
    consolidate_to_sliced(tmp_path / "shards", tmp_path / "slices")
    x = np.random.default_rng(0).standard_normal((4, config.dim))
    expected = forward(result.net(), x).scores
    for world in (1, 2, 4):
        net, _ = consolidate([load_sliced(tmp_path / "slices", r, world) for r in range(world)])
        np.testing.assert_array_equal(forward(net, x).scores, expected)


def test_parallel_training_matches_sim():
    config = RunConfig.from_dict(tiny_config(total_iters=3))
    sim = TrainingRun(config, "sim").run()
    parallel = TrainingRun(config, "parallel", timeout=30).run()
    assert sim.metrics == parallel.metrics
    for a, b in zip(sim.net().param_vectors(), parallel.net().param_vectors()):
        np.testing.assert_array_equal(a, b)


def test_default_config_learns_the_clusters():
    config = RunConfig()
    run = TrainingRun(config)
    result = run.run()
    uniform = math.log(config.prototypes)
    final = float(np.mean([m["loss"] for m in result.metrics[-20:]]))
    assert final <= 0.7 * uniform, f"final loss {final} vs uniform level {uniform}"

    samples, labels = make_dataset(config)
    raw = train_probe(samples, labels, config.probe())
    assert raw.top1 >= 0.99
    probe = train_probe(extract_features(result.net(), samples), labels, config.probe())
    assert probe.top1 >= 0.90
