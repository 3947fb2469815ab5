"""
In-process collectives with a fixed rank-order reduction.

A rank program is a generator function taking a WorldHandle. Collectives are
generator methods used as `x = yield from handle.all_reduce(v)`, so one program
runs unchanged under the round-robin simulator and under one QThread per rank.
"""
import inspect
import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import DeadlockTimeoutError, InvalidArgumentError, InvalidConfigError, ProtocolError

LOGGER = logging.getLogger(__name__)

MODES = ("sim", "parallel")
COLLECTIVES = ("all_reduce", "reduce_scatter", "all_gather", "broadcast", "barrier")


@dataclass
class Collective:
    op: str
    key: Tuple
    rank: int
    payload: np.ndarray
    root: int = 0
    event: Optional[dict] = None


class WorldHandle:
    """One rank's view of the world; owns that rank's append-only event log"""

    def __init__(self, world_size: int, rank: int):
        self.world_size = world_size
        self.rank = rank
        self.step = 0
        self.events: List[dict] = []

    def _request(self, op, vector, layer, tag, root=0) -> Collective:
        payload = np.array(vector, copy=True).reshape(-1)
        event = {"step": self.step, "op": op, "layer": int(layer), "rank": self.rank,
                 "t_start": time.perf_counter(), "t_end": None}
        self.events.append(event)
        return Collective(op, (self.step, op, int(layer), tag), self.rank, payload, root, event)

    def all_reduce(self, vector, layer: int = -1, tag: str = ""):
        result = yield self._request("all_reduce", vector, layer, tag)
        return result

    def reduce_scatter(self, vector, layer: int = -1, tag: str = ""):
        result = yield self._request("reduce_scatter", vector, layer, tag)
        return result

    def all_gather(self, shard, layer: int = -1, tag: str = ""):
        result = yield self._request("all_gather", shard, layer, tag)
        return result

    def broadcast(self, vector, root: int = 0, layer: int = -1, tag: str = ""):
        if not 0 <= root < self.world_size:
            raise InvalidArgumentError(f"Broadcast root {root} is outside [0, {self.world_size})")
        result = yield self._request("broadcast", vector, layer, tag, root)
        return result

    def barrier(self, tag: str = ""):
        yield self._request("barrier", np.zeros(0), -1, tag)

    def log_event(self, op: str, layer: int):
        """Marker for non-collective work, e.g. `free` when full layer params are released"""
        now = time.perf_counter()
        self.events.append({"step": self.step, "op": op, "layer": int(layer), "rank": self.rank,
                            "t_start": now, "t_end": now})


def execute_collective(requests: Sequence[Collective], world_size: int) -> List[np.ndarray]:
    """Rank-ordered requests in, per-rank results out"""
    first = requests[0]
    for req in requests[1:]:
        if req.key != first.key:
            raise ProtocolError(f"Collective mismatch: rank {first.rank} entered {first.key}, "
                                f"rank {req.rank} entered {req.key}")
    op = first.op
    if op not in COLLECTIVES:
        raise ProtocolError(f"Unknown collective '{op}'")
    lengths = {req.payload.shape[0] for req in requests}
    if op == "broadcast":
        roots = {req.root for req in requests}
        if len(roots) != 1:
            raise ProtocolError(f"Broadcast roots disagree: {sorted(roots)}")
        payload = requests[first.root].payload
        return [payload.copy() for _ in requests]
    if op == "barrier":
        return [None for _ in requests]
    if len(lengths) != 1:
        raise ProtocolError(f"{op} payload lengths differ across ranks: {sorted(lengths)}")
    if op == "all_gather":
        full = np.concatenate([req.payload for req in requests])
        return [full.copy() for _ in requests]

    total = requests[0].payload.copy()
    for req in requests[1:]:
        total = total + req.payload
    if op == "all_reduce":
        return [total.copy() for _ in requests]
    length = total.shape[0]
    if length % world_size:
        raise ProtocolError(f"reduce_scatter length {length} is not divisible by world size {world_size}")
    block = length // world_size
    return [total[r * block:(r + 1) * block].copy() for r in range(world_size)]


def advance(gen, value):
    """Resume a rank program; returns (request, None) or (None, finished_value)"""
    try:
        return gen.send(value), None
    except StopIteration as stop:
        return None, stop


class Rendezvous:
    """Barrier-style meeting point for parallel-mode ranks"""

    def __init__(self, world_size: int, timeout: float):
        self.world_size = world_size
        self.timeout = timeout
        self._cond = threading.Condition()
        self._slots: Dict[int, Collective] = {}
        self._generation = 0
        self._results: Dict[int, List] = {}
        self._unread: Dict[int, int] = {}
        self._retired = set()
        self.failure: Optional[Tuple[int, BaseException]] = None

    def _broken(self):
        if self.failure is not None:
            rank, exc = self.failure
            return ProtocolError(f"Rank {rank} failed: {exc}")
        return None

    def exchange(self, rank: int, request: Collective):
        with self._cond:
            broken = self._broken()
            if broken:
                raise broken
            generation = self._generation
            self._slots[rank] = request
            if len(self._slots) == self.world_size:
                ordered = [self._slots[r] for r in range(self.world_size)]
                self._slots = {}
                try:
                    outs = execute_collective(ordered, self.world_size)
                except Exception as exc:
                    self.failure = (rank, exc)
                    self._cond.notify_all()
                    raise
                self._results[generation] = outs
                self._unread[generation] = self.world_size
                self._generation += 1
                self._cond.notify_all()
            else:
                arrived = self._cond.wait_for(
                    lambda: self._generation > generation or self.failure is not None
                    or bool(self._retired), self.timeout)
                if self._generation == generation:
                    if self.failure is not None:
                        raise self._broken()
                    exc = DeadlockTimeoutError(
                        f"Rank {rank} waited on {request.key}; "
                        + ("timed out" if not arrived else f"ranks {sorted(self._retired)} already finished"))
                    self.failure = (rank, exc)
                    self._cond.notify_all()
                    raise exc
            result = self._results[generation][rank]
            self._unread[generation] -= 1
            if self._unread[generation] == 0:
                del self._results[generation], self._unread[generation]
            return result

    def fail(self, rank: int, exc: BaseException):
        with self._cond:
            if self.failure is None:
                self.failure = (rank, exc)
            self._cond.notify_all()

    def retire(self, rank: int):
        with self._cond:
            self._retired.add(rank)
            self._cond.notify_all()


def drive(gen, exchange: Callable[[int, Collective], Any], rank: int):
    """Run one rank program to completion against a blocking exchange"""
    if not inspect.isgenerator(gen):
        return gen
    value = None
    while True:
        request, stop = advance(gen, value)
        if stop is not None:
            return stop.value
        value = exchange(rank, request)
        request.event["t_end"] = time.perf_counter()


class Fabric:
    """Binds N rank programs; `mode` is `sim` (one scheduler) or `parallel` (one QThread per rank)"""

    def __init__(self, world_size: int, mode: str = "sim", timeout: float = 60.0):
        if world_size < 1:
            raise InvalidConfigError(f"world_size must be >= 1, got {world_size}")
        if mode not in MODES:
            raise InvalidConfigError(f"Fabric mode must be one of {MODES}, got '{mode}'")
        self.world_size = world_size
        self.mode = mode
        self.timeout = timeout
        self.handles: List[WorldHandle] = [WorldHandle(world_size, r) for r in range(world_size)]

    @property
    def events(self) -> List[dict]:
        return [event for handle in self.handles for event in handle.events]

    def events_for(self, rank: int) -> List[dict]:
        return list(self.handles[rank].events)

    def reset_events(self):
        for handle in self.handles:
            handle.events.clear()

    def export_events(self, path) -> int:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        events = self.events
        with open(path, "w", encoding="utf-8") as f:
            for event in events:
                f.write(json.dumps(event) + "\n")
        return len(events)

    def run(self, program: Callable[[WorldHandle], Any]) -> List[Any]:
        """Run `program(handle)` on every rank; returns per-rank return values"""
        LOGGER.debug("Running program on %d ranks (%s)", self.world_size, self.mode)
        if self.mode == "parallel":
            return self._run_parallel(program)
        return self._run_sim(program)

    def _run_sim(self, program) -> List[Any]:
        n = self.world_size
        gens = [program(handle) for handle in self.handles]
        results: List[Any] = [None] * n
        done = [False] * n
        for r, gen in enumerate(gens):
            if not inspect.isgenerator(gen):
                results[r], done[r] = gen, True
        replies: List[Any] = [None] * n
        while not all(done):
            pending: Dict[int, Collective] = {}
            for r in range(n):
                if done[r]:
                    continue
                request, stop = advance(gens[r], replies[r])
                if stop is not None:
                    results[r], done[r] = stop.value, True
                else:
                    pending[r] = request
            if not pending:
                break
            if len(pending) < n:
                waiting = sorted(pending)
                raise DeadlockTimeoutError(
                    f"Ranks {waiting} wait on {pending[waiting[0]].key} "
                    f"but ranks {[r for r in range(n) if done[r]]} already finished")
            outs = execute_collective([pending[r] for r in range(n)], n)
            now = time.perf_counter()
            for r in range(n):
                pending[r].event["t_end"] = now
            replies = outs
        return results

    def _run_parallel(self, program) -> List[Any]:
        from PySide6.QtCore import QCoreApplication, Qt

        from core.rank_thread import RankThread

        if QCoreApplication.instance() is None:
            self._app = QCoreApplication([])
        rendezvous = Rendezvous(self.world_size, self.timeout)
        threads = [RankThread(handle.rank, program, handle, rendezvous) for handle in self.handles]
        for thread in threads:
            thread.log.connect(LOGGER.debug, Qt.DirectConnection)
            thread.error.connect(LOGGER.warning, Qt.DirectConnection)
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.wait()
        if rendezvous.failure is not None:
            raise rendezvous.failure[1]
        return [thread.result for thread in threads]
