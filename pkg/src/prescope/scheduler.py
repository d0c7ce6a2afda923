import heapq
import logging
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field, replace
from fractions import Fraction

from prescope.constants import ORACLE_MAX_EXPERTS
from prescope.costmodel import (
    CostParams,
    ExpertLoad,
    HitStats,
    Location,
    cpu_prefix_costs,
    overlap_prefetch_count,
    prefetch_gain,
)
from prescope.errors import InstanceTooLargeError
from prescope.policytype import PolicyKind, SchedulerPolicy
from prescope.workload import LayerGroup

logger = logging.getLogger(__name__)


def sort_loads(loads: Iterable[ExpertLoad]) -> tuple[ExpertLoad, ...]:
    return tuple(sorted(loads, key=lambda load: (load.tokens, load.expert)))


def loads_from_counts(counts: dict[int, int], layer: int) -> tuple[ExpertLoad, ...]:
    return sort_loads(ExpertLoad(expert, layer, tokens) for expert, tokens in counts.items() if tokens > 0)


@dataclass(frozen=True)
class LayerInputs:
    """
    Scheduling inputs of one layer.

    `e_cur` holds the gating truth of the current layer, `e_next` the prediction of the
    next one and `e_next2` the depth-2 prediction used when the window widens. All lists
    are sorted ascending by (tokens, expert) and contain only experts still on the host.
    """

    e_cur: tuple[ExpertLoad, ...]
    e_next: tuple[ExpertLoad, ...]
    params: CostParams
    stats: HitStats
    e_next2: tuple[ExpertLoad, ...] | None = None
    stats_far: HitStats | None = None

    def __post_init__(self) -> None:
        for name in ("e_cur", "e_next", "e_next2"):
            loads = getattr(self, name)
            if loads is None:
                continue
            object.__setattr__(self, name, tuple(loads))
            if list(loads) != list(sort_loads(loads)):
                message = f"{name} must be sorted ascending by token count"
                raise ValueError(message)
            if any(load.location != Location.HOST for load in loads):
                message = f"{name} must not contain resident or in-flight experts"
                raise ValueError(message)


@dataclass(frozen=True)
class QueueEntry:
    load: ExpertLoad
    is_current: bool
    index: int


@dataclass(frozen=True)
class DecisionTrace:
    gpu_queue: tuple[tuple[int, bool], ...] = ()
    sweep: tuple[tuple[int, int], ...] = ()
    t_g_split: int | None = None
    t_c_split: int | None = None
    f: Fraction | None = None
    f_int: int | None = None
    xi: float | None = None
    widened: bool = False
    steps: int = 0
    fallback: bool = False

    def dump(self) -> str:
        queue = " ".join(f"{expert}{'c' if current else 'n'}" for expert, current in self.gpu_queue)
        return (
            f"gpu_q=[{queue}] t_g={self.t_g_split} t_c={self.t_c_split} "
            f"f={self.f} f_int={self.f_int} xi={self.xi} widened={self.widened} steps={self.steps} "
            f"fallback={self.fallback}"
        )


@dataclass(frozen=True)
class LayerPlan:
    cpu_set: tuple[ExpertLoad, ...]
    ondemand_seq: tuple[ExpertLoad, ...]
    prefetch_seq: tuple[ExpertLoad, ...]
    split_index: int
    issued_prefetches: int
    prefetch_depth: int = 1
    decision: DecisionTrace = field(default_factory=DecisionTrace)


def plan_from_split(
    inputs: LayerInputs,
    split: int,
    prefetch_count: int,
    depth: int = 1,
    decision: DecisionTrace | None = None,
) -> LayerPlan:
    """Build the plan computing `e_cur[:split]` on CPU and prefetching the hottest experts of the target layer."""
    targets = inputs.e_next if depth == 1 else (inputs.e_next2 or ())
    count = min(prefetch_count, len(targets))
    return LayerPlan(
        cpu_set=inputs.e_cur[:split],
        ondemand_seq=inputs.e_cur[split:],
        prefetch_seq=tuple(reversed(targets[len(targets) - count :])),
        split_index=split,
        issued_prefetches=count,
        prefetch_depth=depth if count else 1,
        decision=decision or DecisionTrace(),
    )


################################################################################


class _StepCounter:
    def __init__(self) -> None:
        self.steps = 0


def _cross_layer_sweep(
    e_cur: Sequence[ExpertLoad],
    e_next: Sequence[ExpertLoad],
    params: CostParams,
    counter: _StepCounter,
) -> tuple[list[QueueEntry], list[tuple[int, int]]]:
    current = (QueueEntry(load, True, index) for index, load in enumerate(e_cur))
    predicted = (QueueEntry(load, False, index) for index, load in enumerate(e_next))
    e_all = list(
        heapq.merge(current, predicted, key=lambda entry: (entry.load.tokens, not entry.is_current, entry.load.expert)),
    )

    prefix = cpu_prefix_costs([entry.load for entry in e_all], params)
    queue, sweep = [], []
    for k, entry in enumerate(e_all):
        counter.steps += 1
        t_g_all = params.alpha + (len(e_all) - k) * params.t_io + params.t_g
        t_c_all = prefix[k + 1] + params.t_attn
        sweep.append((t_g_all, t_c_all))
        if t_g_all < t_c_all:
            queue.append(entry)
    return queue, sweep


def build_cross_layer_queue(inputs: LayerInputs) -> list[QueueEntry]:
    queue, _ = _cross_layer_sweep(inputs.e_cur, inputs.e_next, inputs.params, _StepCounter())
    return queue


def _split_costs(split: int, e_cur: Sequence[ExpertLoad], prefix: list[int], params: CostParams) -> tuple[int, int]:
    return params.alpha + (len(e_cur) - split) * params.t_io + params.t_g, prefix[split]


def _ondemand_split(inputs: LayerInputs, gpu_q: Sequence[QueueEntry], counter: _StepCounter) -> int:
    prefix = cpu_prefix_costs(inputs.e_cur, inputs.params)
    split = len(inputs.e_cur)
    queued: set[int] = set()
    for entry in gpu_q:
        counter.steps += 1
        if not entry.is_current:
            continue
        queued.add(entry.index)
        t_g, t_c = _split_costs(entry.index, inputs.e_cur, prefix, inputs.params)
        if t_g < t_c:
            split = entry.index
            break

    # Current entries come in index order, so every queued index below `split` was seen
    if split - 1 in queued:
        t_g, _ = _split_costs(split - 1, inputs.e_cur, prefix, inputs.params)
        if t_g < prefix[split]:
            return split - 1
    return split


def ondemand_split(inputs: LayerInputs, gpu_q: Sequence[QueueEntry]) -> int:
    """
    Index of the first current-layer expert loaded on demand.

    The scan takes the smallest queued index whose loaded suffix beats the CPU prefix
    (`len(e_cur)` if none does). It then loads one more queued expert when the longer
    transfer sequence still finishes before the shorter CPU prefix.
    """
    return _ondemand_split(inputs, gpu_q, _StepCounter())


@dataclass(frozen=True)
class PrefetchDecision:
    count: int
    prefetch_seq: tuple[ExpertLoad, ...]
    depth: int
    f: Fraction | None = None
    f_int: int | None = None
    xi: float | None = None
    widened: bool = False


def _size_prefetch(
    inputs: LayerInputs,
    split: int,
    targets: Sequence[ExpertLoad],
    stats: HitStats,
) -> tuple[int, Fraction, int, float]:
    """
    Prefetch `f_int` targets when the critical prefetch pays off and `f_int - 1` otherwise.

    With fewer targets than `f_int` all of them finish inside the overlap and none is
    critical, so the count is `len(targets)` whatever the gain.
    """
    params = inputs.params
    t_cpu = cpu_prefix_costs(inputs.e_cur[:split], params)[-1]
    t_gap = t_cpu - params.alpha - (len(inputs.e_cur) - split) * params.t_io
    f, f_int = overlap_prefetch_count(t_gap, params)
    xi = prefetch_gain(stats, f, f_int, params)
    if len(targets) < f_int:
        return len(targets), f, f_int, xi
    return (f_int if xi > 0 else max(f_int - 1, 0)), f, f_int, xi


def _prefetch_decision(
    inputs: LayerInputs,
    gpu_q: Sequence[QueueEntry],
    split: int,
    counter: _StepCounter,
) -> PrefetchDecision:
    if any(not entry.is_current for entry in gpu_q):
        count, f, f_int, xi = _size_prefetch(inputs, split, inputs.e_next, inputs.stats)
        seq = tuple(reversed(inputs.e_next[len(inputs.e_next) - count :]))
        return PrefetchDecision(count, seq, 1, f, f_int, xi)

    if not inputs.e_next2:
        return PrefetchDecision(0, (), 1)

    # Widen the prediction window by one layer and apply the same test once
    far_q, _ = _cross_layer_sweep(inputs.e_cur, inputs.e_next2, inputs.params, counter)
    if all(entry.is_current for entry in far_q):
        return PrefetchDecision(0, (), 1, widened=True)

    stats = inputs.stats_far or inputs.stats
    count, f, f_int, xi = _size_prefetch(inputs, split, inputs.e_next2, stats)
    seq = tuple(reversed(inputs.e_next2[len(inputs.e_next2) - count :]))
    return PrefetchDecision(count, seq, 2 if count else 1, f, f_int, xi, widened=True)


def prefetch_decision(inputs: LayerInputs, gpu_q: Sequence[QueueEntry], split: int) -> PrefetchDecision:
    return _prefetch_decision(inputs, gpu_q, split, _StepCounter())


def schedule_layer(inputs: LayerInputs) -> LayerPlan:
    counter = _StepCounter()
    gpu_q, sweep = _cross_layer_sweep(inputs.e_cur, inputs.e_next, inputs.params, counter)
    split = _ondemand_split(inputs, gpu_q, counter)
    decision = _prefetch_decision(inputs, gpu_q, split, counter)

    prefix = cpu_prefix_costs(inputs.e_cur, inputs.params)
    t_g, t_c = _split_costs(split, inputs.e_cur, prefix, inputs.params)
    trace = DecisionTrace(
        gpu_queue=tuple((entry.load.expert, entry.is_current) for entry in gpu_q),
        sweep=tuple(sweep),
        t_g_split=t_g,
        t_c_split=t_c,
        f=decision.f,
        f_int=decision.f_int,
        xi=decision.xi,
        widened=decision.widened,
        steps=counter.steps,
    )
    logger.debug(f"presched split={split} prefetch={decision.count} depth={decision.depth} {trace.dump()}")
    return plan_from_split(inputs, split, decision.count, decision.depth, trace)


################################################################################


def greedy_layer_baseline(inputs: LayerInputs) -> LayerPlan:
    """
    Minimize the current layer's finish time alone, then fill the idle channel with prefetches.

    Only suffix-on-GPU partitions are considered; ties go to the partition with fewer loads.
    """
    params, e_cur = inputs.params, inputs.e_cur
    prefix = cpu_prefix_costs(e_cur, params)

    best_split, best_finish = len(e_cur), prefix[len(e_cur)]
    for split in range(len(e_cur) - 1, -1, -1):
        t_g, t_c = _split_costs(split, e_cur, prefix, params)
        if max(t_g, t_c) < best_finish:
            best_split, best_finish = split, max(t_g, t_c)

    io_ready = params.alpha + (len(e_cur) - best_split) * params.t_io
    count = 0
    if best_finish > io_ready and inputs.e_next:
        count = min(len(inputs.e_next), math.ceil((best_finish - io_ready) / params.t_io))

    logger.debug(f"greedy split={best_split} finish={best_finish} prefetch={count}")
    return plan_from_split(inputs, best_split, count)


def ondemand_only(inputs: LayerInputs) -> LayerPlan:
    return plan_from_split(inputs, 0, 0)


def fixed_prefetch(inputs: LayerInputs, prefetch_count: int) -> LayerPlan:
    plan = schedule_layer(inputs)
    return plan_from_split(inputs, plan.split_index, prefetch_count, decision=plan.decision)


def plan_layer(policy: SchedulerPolicy, inputs: LayerInputs) -> LayerPlan:
    match policy.kind:
        case PolicyKind.PRESCHED:
            return schedule_layer(inputs)
        case PolicyKind.LAYER_GREEDY:
            return greedy_layer_baseline(inputs)
        case PolicyKind.ONDEMAND_ONLY:
            return ondemand_only(inputs)
        case PolicyKind.FIXED_PREFETCH:
            assert policy.prefetch_count is not None
            return fixed_prefetch(inputs, policy.prefetch_count)
        case PolicyKind.ORACLE:
            message = "The oracle policy needs a simulator to evaluate candidate plans"
            raise ValueError(message)


@dataclass(frozen=True)
class OracleChoice:
    plan: LayerPlan
    makespan: int
    candidates: int


def enumeration_oracle(inputs: LayerInputs, evaluate: Callable[[LayerPlan], int]) -> OracleChoice:
    """
    Exhaustively try every (split, prefetch count) pair of a layer.

    `evaluate` simulates the candidate plan over a two-layer horizon and returns its makespan.
    Ties prefer the smaller split, then the smaller prefetch count.
    """
    if len(inputs.e_cur) > ORACLE_MAX_EXPERTS or len(inputs.e_next) > ORACLE_MAX_EXPERTS:
        message = (
            f"Oracle supports at most {ORACLE_MAX_EXPERTS} experts per layer, "
            f"got {len(inputs.e_cur)} current and {len(inputs.e_next)} predicted"
        )
        raise InstanceTooLargeError(message)

    best: OracleChoice | None = None
    candidates = 0
    for split in range(len(inputs.e_cur) + 1):
        for count in range(len(inputs.e_next) + 1):
            plan = plan_from_split(inputs, split, count)
            makespan = evaluate(plan)
            candidates += 1
            if best is None or makespan < best.makespan:
                best = OracleChoice(plan, makespan, 0)

    assert best is not None
    logger.debug(f"oracle split={best.plan.split_index} prefetch={best.plan.issued_prefetches} makespan={best.makespan}")
    return replace(best, candidates=candidates)


################################################################################


class HitTracker:
    """Per-group exponentially weighted hit rate of critical prefetches."""

    def __init__(self, initial_rate: float, window: int = 32) -> None:
        if window < 1:
            message = f"Hit window must be >= 1, got {window}"
            raise ValueError(message)
        self.window = window
        self.smoothing = 2.0 / (window + 1)
        self.rates = dict.fromkeys(LayerGroup, initial_rate)
        self.observations = dict.fromkeys(LayerGroup, 0)

    def stats(self, group: LayerGroup) -> HitStats:
        return HitStats.from_hit_rate(self.rates[group], min(self.observations[group], self.window))

    def observe(self, group: LayerGroup, hit: bool) -> None:
        rate = self.rates[group]
        self.rates[group] = min(1.0, max(0.0, rate + self.smoothing * (float(hit) - rate)))
        self.observations[group] += 1
