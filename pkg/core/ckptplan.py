"""
Activation checkpoint planning: minimax partition of the per-layer activation
array into consecutive segments, a budget-driven segment search and the peak
memory / recompute model used to compare plans.
"""
import logging
from dataclasses import dataclass
from itertools import accumulate
from typing import List, Optional, Sequence, Tuple

from core.errors import InfeasibleBudgetError, InvalidArgumentError, InvalidPlanError

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckpointPlan:
    boundaries: Tuple[int, ...]
    n_segments: int
    minimax_sum: float
    modeled_peak: float
    recompute_flops: float
    n_layers: int

    def segments(self) -> List[Tuple[int, int]]:
        starts = (0,) + self.boundaries
        return list(zip(starts, self.boundaries + (self.n_layers,)))

    def to_dict(self) -> dict:
        return {
            "boundaries": list(self.boundaries),
            "n_segments": self.n_segments,
            "minimax_sum": self.minimax_sum,
            "modeled_peak": self.modeled_peak,
            "recompute_flops": self.recompute_flops,
        }


def _values(m) -> List:
    values = list(getattr(m, "m", m))
    if not values:
        raise InvalidArgumentError("Activation profile is empty")
    if any(v < 0 for v in values):
        raise InvalidArgumentError("Activation sizes must be >= 0")
    return values


def _check_boundaries(boundaries: Sequence[int], n: int) -> Tuple[int, ...]:
    boundaries = tuple(int(b) for b in boundaries)
    if any(b <= a for a, b in zip(boundaries, boundaries[1:])):
        raise InvalidPlanError(f"Boundaries {list(boundaries)} are not strictly increasing")
    if any(not 0 < b < n for b in boundaries):
        raise InvalidPlanError(f"Boundaries {list(boundaries)} must lie in (0, {n})")
    return boundaries


def segment_sums(m, boundaries: Sequence[int]) -> List:
    values = _values(m)
    starts = [0] + list(boundaries)
    ends = list(boundaries) + [len(values)]
    return [sum(values[s:e]) for s, e in zip(starts, ends)]


def simulate_peak(m, plan) -> float:
    """
    Retained segment-start activations plus the largest segment being re-forwarded.
    `plan` is a CheckpointPlan, a boundary list or None (no checkpointing).
    """
    values = _values(m)
    boundaries = plan.boundaries if isinstance(plan, CheckpointPlan) else tuple(plan or ())
    boundaries = _check_boundaries(boundaries, len(values))
    starts = [0] + list(boundaries)
    retained = sum(values[s] for s in starts)
    live = max(total - values[s] for s, total in zip(starts, segment_sums(values, boundaries)))
    return retained + live


def recompute_flops(plan, flops: Optional[Sequence[float]] = None, n_layers: Optional[int] = None) -> float:
    """Every layer inside a checkpointed plan is re-forwarded once during backward"""
    if isinstance(plan, CheckpointPlan):
        boundaries, n_layers = plan.boundaries, plan.n_layers
    else:
        boundaries = tuple(plan or ())
    if flops is None:
        if n_layers is None:
            raise InvalidArgumentError("Need per-layer flops or a layer count")
        flops = [1] * n_layers
    if not boundaries:
        return 0
    return sum(flops)


def _minimax(values: Sequence, n_segments: int) -> float:
    """Optimal max segment sum over partitions into exactly n_segments pieces"""
    n = len(values)
    prefix = [0] + list(accumulate(values))
    inf = float("inf")
    best = [prefix[i] for i in range(n + 1)]
    for k in range(2, n_segments + 1):
        nxt = [inf] * (n + 1)
        for i in range(k, n + 1):
            for j in range(k - 1, i):
                cost = max(best[j], prefix[i] - prefix[j])
                if cost < nxt[i]:
                    nxt[i] = cost
        best = nxt
    return best[n]


def _lexicographic_boundaries(values: Sequence, n_segments: int, limit: float) -> Tuple[int, ...]:
    """Smallest boundary list whose segments all stay within `limit`"""
    n = len(values)
    prefix = [0] + list(accumulate(values))
    # feasible[k][j]: values[j:] splits into exactly k segments each <= limit
    feasible = [[False] * (n + 1) for _ in range(n_segments + 1)]
    for j in range(n):
        feasible[1][j] = prefix[n] - prefix[j] <= limit
    for k in range(2, n_segments + 1):
        for j in range(n):
            feasible[k][j] = any(prefix[t] - prefix[j] <= limit and feasible[k - 1][t]
                                 for t in range(j + 1, n))
    boundaries = []
    prev = 0
    for remaining in range(n_segments - 1, 0, -1):
        for p in range(prev + 1, n):
            if prefix[p] - prefix[prev] <= limit and feasible[remaining][p]:
                boundaries.append(p)
                prev = p
                break
    return tuple(boundaries)


def plan_from_boundaries(m, boundaries: Sequence[int], flops: Optional[Sequence[float]] = None) -> CheckpointPlan:
    """Evaluate a given (possibly hand-edited) boundary list with the planner's model"""
    values = _values(m)
    boundaries = _check_boundaries(boundaries, len(values))
    return CheckpointPlan(
        boundaries=boundaries,
        n_segments=len(boundaries) + 1,
        minimax_sum=max(segment_sums(values, boundaries)),
        modeled_peak=simulate_peak(values, boundaries),
        recompute_flops=recompute_flops(boundaries, flops, len(values)),
        n_layers=len(values),
    )


def plan(m, n_segments: int, flops: Optional[Sequence[float]] = None) -> CheckpointPlan:
    values = _values(m)
    if not 1 <= n_segments <= len(values):
        raise InvalidArgumentError(f"n_segments must be in [1, {len(values)}], got {n_segments}")
    limit = _minimax(values, n_segments)
    result = plan_from_boundaries(values, _lexicographic_boundaries(values, n_segments, limit), flops)
    LOGGER.debug("Plan for %d segments: %s (minimax %s)", n_segments, result.boundaries, limit)
    return result


def auto_plan(m, memory_budget: float, flops: Optional[Sequence[float]] = None) -> CheckpointPlan:
    """Fewest segments whose modeled peak fits the budget"""
    values = _values(m)
    peaks = []
    for n_segments in range(1, len(values) + 1):
        candidate = plan(values, n_segments, flops)
        if candidate.modeled_peak <= memory_budget:
            LOGGER.info("Budget %s fits with %d segments (peak %s)",
                        memory_budget, n_segments, candidate.modeled_peak)
            return candidate
        peaks.append(candidate.modeled_peak)
    raise InfeasibleBudgetError(memory_budget, min(peaks))
