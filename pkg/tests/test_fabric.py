import json
import time

import numpy as np
import pytest

from core.errors import DeadlockTimeoutError, InvalidArgumentError, InvalidConfigError, ProtocolError
from core.fabric import Fabric

MODES = ["sim", "parallel"]


def run(world, program, mode="sim"):
    return Fabric(world, mode, timeout=10).run(program)


@pytest.mark.parametrize("mode", MODES)
def test_all_reduce_sums_on_every_rank(mode):
    inputs = [np.array([1.0, 2.0]), np.array([3.0, 4.0])]

    def program(handle):
        return (yield from handle.all_reduce(inputs[handle.rank]))

    for result in run(2, program, mode):
        np.testing.assert_array_equal(result, [4.0, 6.0])


def test_single_rank_is_identity():
    vector = np.array([0.1, 0.2, 0.3])

    def program(handle):
        reduced = yield from handle.all_reduce(vector)
        gathered = yield from handle.all_gather(vector)
        scattered = yield from handle.reduce_scatter(vector)
        broadcast = yield from handle.broadcast(vector)
        return reduced, gathered, scattered, broadcast

    for out in run(1, program)[0]:
        np.testing.assert_array_equal(out, vector)


@pytest.mark.parametrize("mode", MODES)
def test_reduce_scatter_blocks(mode):
    def program(handle):
        vector = np.array([1.0, 2.0]) if handle.rank == 0 else np.array([3.0, 4.0])
        return (yield from handle.reduce_scatter(vector))

    results = run(2, program, mode)
    np.testing.assert_array_equal(results[0], [4.0])
    np.testing.assert_array_equal(results[1], [6.0])


def test_all_gather_concatenates_in_rank_order():
    def program(handle):
        return (yield from handle.all_gather(np.array([handle.rank + 1.0])))

    for result in run(2, program):
        np.testing.assert_array_equal(result, [1.0, 2.0])


@pytest.mark.parametrize("seed", range(3))
def test_gather_after_scatter_is_the_fold(seed):
    rng = np.random.default_rng(seed)
    inputs = [rng.standard_normal(12) for _ in range(4)]
    expected = ((inputs[0] + inputs[1]) + inputs[2]) + inputs[3]

    def program(handle):
        shard = yield from handle.reduce_scatter(inputs[handle.rank])
        return (yield from handle.all_gather(shard))

    for result in run(4, program):
        np.testing.assert_array_equal(result, expected)


@pytest.mark.parametrize("mode", MODES)
def test_broadcast_from_root(mode):
    payload = np.random.default_rng(3).standard_normal(7)

    def program(handle):
        mine = payload if handle.rank == 2 else np.zeros(7)
        return (yield from handle.broadcast(mine, root=2))

    for result in run(3, program, mode):
        np.testing.assert_array_equal(result, payload)


def test_broadcast_rejects_bad_root():
    def program(handle):
        return (yield from handle.broadcast(np.zeros(1), root=5))

    with pytest.raises(InvalidArgumentError):
        run(2, program)


def test_reduction_order_is_fixed():
    values = [np.array([1e16]), np.array([1.0]), np.array([-1e16]), np.array([1.0])]

    def program(handle):
        return (yield from handle.all_reduce(values[handle.rank]))

    first = run(4, program)
    second = run(4, program)
    np.testing.assert_array_equal(first[0], ((values[0] + values[1]) + values[2]) + values[3])
    np.testing.assert_array_equal(first[0], second[0])


def test_payload_dtype_is_preserved():
    def program(handle):
        return (yield from handle.all_gather(np.ones(2, dtype=np.float32)))

    assert run(2, program)[0].dtype == np.float32


@pytest.mark.parametrize("mode", MODES)
def test_missing_rank_is_a_deadlock(mode):
    def program(handle):
        if handle.rank == 0:
            yield from handle.all_reduce(np.ones(1))
        return handle.rank

    with pytest.raises(DeadlockTimeoutError):
        run(2, program, mode)


@pytest.mark.parametrize("mode", MODES)
def test_mismatched_collectives_fail(mode):
    def program(handle):
        if handle.rank == 0:
            yield from handle.all_reduce(np.ones(2))
        else:
            yield from handle.all_gather(np.ones(2))

    with pytest.raises(ProtocolError):
        run(2, program, mode)


def test_payload_length_mismatch_fails():
    def program(handle):
        yield from handle.all_reduce(np.ones(handle.rank + 1))

    with pytest.raises(ProtocolError):
        run(2, program)


def test_parallel_timeout():
    def program(handle):
        if handle.rank == 1:
            time.sleep(1.0)
            return None
        yield from handle.barrier()

    with pytest.raises(DeadlockTimeoutError):
        Fabric(2, "parallel", timeout=0.2).run(program)


def test_barrier_and_event_log(tmp_path):
    fabric = Fabric(2, "sim")

    def program(handle):
        handle.step = 4
        yield from handle.barrier(tag="checkpoint")
        handle.log_event("free", 0)

    fabric.run(program)
    events = fabric.events_for(1)
    assert [e["op"] for e in events] == ["barrier", "free"]
    assert all(e["step"] == 4 and e["rank"] == 1 for e in events)
    assert events[0]["t_end"] >= events[0]["t_start"]

    count = fabric.export_events(tmp_path / "events.jsonl")
    lines = (tmp_path / "events.jsonl").read_text(encoding="utf-8").splitlines()
    assert count == len(lines) == 4
    assert {"step", "op", "layer", "rank", "t_start", "t_end"} == set(json.loads(lines[0]))

    fabric.reset_events()
    assert fabric.events == []


@pytest.mark.parametrize("mode", ["sim", "parallel"])
def test_every_collective_logs_one_entry_per_rank(mode):
    world = 3
    fabric = Fabric(world, mode, timeout=10)

    def program(handle):
        v = np.full(6, float(handle.rank))
        yield from handle.all_reduce(v, layer=0)
        yield from handle.reduce_scatter(v, layer=1)
        yield from handle.all_gather(v[:2], layer=2)
        yield from handle.broadcast(v, root=1, layer=3)
        yield from handle.barrier()

    fabric.run(program)
    calls = [("all_reduce", 0), ("reduce_scatter", 1), ("all_gather", 2), ("broadcast", 3), ("barrier", -1)]
    assert len(fabric.events) == world * len(calls)
    for op, layer in calls:
        ranks = sorted(e["rank"] for e in fabric.events if e["op"] == op and e["layer"] == layer)
        assert ranks == list(range(world)), f"{op}: {ranks}"


def test_parallel_matches_sim():
    rng = np.random.default_rng(11)
    inputs = [rng.standard_normal(9) for _ in range(3)]

    def program(handle):
        total = yield from handle.all_reduce(inputs[handle.rank])
        shard = yield from handle.reduce_scatter(np.concatenate([total, [0.0, 0.0, 0.0]]))
        return (yield from handle.all_gather(shard))

    sim = run(3, program, "sim")
    parallel = run(3, program, "parallel")
    for a, b in zip(sim, parallel):
        np.testing.assert_array_equal(a, b)


def test_invalid_fabric_settings():
    with pytest.raises(InvalidConfigError):
        Fabric(0)
    with pytest.raises(InvalidConfigError):
        Fabric(2, "mpi")
