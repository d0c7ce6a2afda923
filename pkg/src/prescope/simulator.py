import copy
import json
import logging
from collections import Counter, defaultdict
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any

from omegaconf import DictConfig

from prescope.config import SimulatorConfig
from prescope.constants import TICK_UNIT, TIMELINE_FORMAT_VERSION
from prescope.costmodel import CostParams, cpu_cost
from prescope.errors import BufferOverflowError, ShapeMismatchError
from prescope.policytype import PolicyKind, SchedulerPolicy
from prescope.scheduler import (
    HitTracker,
    LayerInputs,
    LayerPlan,
    enumeration_oracle,
    loads_from_counts,
    ondemand_only,
    plan_from_split,
    plan_layer,
    schedule_layer,
)
from prescope.utils import write_text_atomic
from prescope.workload import LayerGroup, ModelSpec, Trace

if TYPE_CHECKING:
    from prescope.predictor import RoutingPredictor

logger = logging.getLogger(__name__)


class Resource(Enum):
    GPU = "gpu"
    CPU = "cpu"
    IO = "io"


RESOURCE_ORDER = {Resource.GPU: 0, Resource.CPU: 1, Resource.IO: 2}


class EventKind(Enum):
    ATTENTION = "attention"
    GPU_EXPERT = "gpu_expert"
    CPU_EXPERT = "cpu_expert"
    LOAD = "load"
    PREFETCH = "prefetch"
    IDLE = "idle"


TRANSFER_KINDS = (EventKind.LOAD, EventKind.PREFETCH)
COMPUTE_KINDS = (EventKind.GPU_EXPERT, EventKind.CPU_EXPERT)


@dataclass(frozen=True)
class TimelineEvent:
    """One busy interval; `layer` is the pipeline instance (the target instance for prefetches)."""

    t_start: int
    t_end: int
    resource: Resource
    kind: EventKind
    layer: int
    expert: int | None = None
    tokens: int = 0
    lane: int = 0

    def __post_init__(self) -> None:
        if self.t_start > self.t_end:
            message = f"Event ends before it starts: {self.t_start} > {self.t_end}"
            raise ValueError(message)

    def sort_key(self) -> tuple[int, int, int, int]:
        return (self.t_start, RESOURCE_ORDER[self.resource], self.layer, -1 if self.expert is None else self.expert)

    def to_record(self) -> list[Any]:
        return [self.t_start, self.t_end, self.resource.value, self.kind.value, self.layer, self.expert, self.tokens]

    @classmethod
    def from_record(cls, record: list[Any]) -> "TimelineEvent":
        t_start, t_end, resource, kind, layer, expert, tokens = record
        return cls(t_start, t_end, Resource(resource), EventKind(kind), layer, expert, tokens)


class TransferKind(Enum):
    ONDEMAND = "ondemand"
    PREFETCH = "prefetch"


@dataclass(frozen=True)
class TransferJob:
    """A non-preemptible expert transfer made of the three weight matrices sent back to back."""

    expert: int
    target: int
    kind: TransferKind
    duration: int

    def chunks(self) -> tuple[int, int, int]:
        base, extra = divmod(self.duration, 3)
        return (base + (extra > 0), base + (extra > 1), base)

    def finish(self, start: int) -> int:
        return start + sum(self.chunks())


@dataclass(frozen=True)
class PrefetchCounts:
    issued: int = 0
    hits: int = 0
    dropped: int = 0


@dataclass(frozen=True)
class Timeline:
    events: tuple[TimelineEvent, ...]
    t_io: int
    instance_layers: tuple[int, ...] = ()
    # (barrier, attention end, compute end) per instance
    layer_bounds: tuple[tuple[int, int, int], ...] = ()
    activated: tuple[tuple[int, int, int], ...] = ()
    resident: frozenset[tuple[int, int]] = frozenset()
    output_tokens: int = 0
    num_iterations: int = 1
    prefetch: PrefetchCounts = field(default_factory=PrefetchCounts)
    plans: tuple[str, ...] = ()

    def records(self) -> list[list[Any]]:
        return [event.to_record() for event in self.events]


################################################################################


@dataclass(frozen=True)
class Instance:
    """One layer execution of one decode iteration with the routing known before it runs."""

    layer: int
    loads: dict[int, int]
    predicted: dict[int, int] = field(default_factory=dict)
    predicted_far: dict[int, int] = field(default_factory=dict)
    group: LayerGroup = LayerGroup.MIDDLE


@dataclass(frozen=True)
class Workload:
    instances: tuple[Instance, ...]
    output_tokens: int = 0
    num_iterations: int = 1

    @property
    def widest_prediction(self) -> int:
        """Most experts prefetched for one instance across both prediction depths."""
        return max((len(inst.predicted.keys() | inst.predicted_far.keys()) for inst in self.instances), default=0)


@dataclass(frozen=True)
class _Prefetched:
    expert: int
    t_end: int
    slot: int
    depth: int


@dataclass
class _PipelineState:
    cpu_free: list[int]
    prefetch_slots: dict[int, list[list[int | None]]]
    tracker: HitTracker
    barrier: int = 0
    io_free: int = 0
    ondemand_free: list[int] = field(default_factory=lambda: [0, 0])
    inflight: dict[int, list[_Prefetched]] = field(default_factory=dict)
    events: list[TimelineEvent] = field(default_factory=list)
    bounds: list[tuple[int, int, int]] = field(default_factory=list)
    plans: list[str] = field(default_factory=list)
    issued: int = 0
    hits: int = 0
    dropped: int = 0

    def fork(self) -> "_PipelineState":
        return _PipelineState(
            cpu_free=list(self.cpu_free),
            prefetch_slots={group: [list(slot) for slot in slots] for group, slots in self.prefetch_slots.items()},
            tracker=copy.deepcopy(self.tracker),
            barrier=self.barrier,
            io_free=self.io_free,
            ondemand_free=list(self.ondemand_free),
            inflight={target: list(records) for target, records in self.inflight.items()},
            bounds=list(self.bounds),
            issued=self.issued,
            hits=self.hits,
            dropped=self.dropped,
        )


@dataclass(frozen=True)
class _LayerContext:
    index: int
    attention_end: int
    inputs: LayerInputs
    # (ready, transfer end, expert, tokens, prefetch slot or None)
    ready_jobs: tuple[tuple[int, int, int, int, _Prefetched | None], ...]
    prefetched: tuple[_Prefetched, ...]


Planner = Callable[[_PipelineState, _LayerContext], LayerPlan]


class PipelineSimulator:
    """
    Discrete-event model of attention and expert compute on a GPU, expert compute on the
    CPU and a single serial host-to-GPU transfer channel.

    Layers run back to back: the next layer's attention starts once both devices finished
    the current layer. Only prefetch transfers cross that barrier.
    """

    def __init__(
        self,
        workload: Workload,
        params: CostParams,
        resident: frozenset[tuple[int, int]] = frozenset(),
        cpu_slots: int = 1,
        prefetch_slots: int | None = None,
        initial_hit_rate: float = 0.9,
        hit_window: int = 32,
    ) -> None:
        if cpu_slots < 1:
            message = f"cpu_slots must be >= 1, got {cpu_slots}"
            raise ValueError(message)
        self.workload = workload
        self.params = params
        self.resident = resident
        self.cpu_slots = cpu_slots
        if prefetch_slots is None:
            prefetch_slots = max(1, workload.widest_prediction)
        self.prefetch_slots = prefetch_slots
        self.initial_hit_rate = initial_hit_rate
        self.hit_window = hit_window

    def _initial_state(self) -> _PipelineState:
        return _PipelineState(
            cpu_free=[0] * self.cpu_slots,
            prefetch_slots={group: [[0, None] for _ in range(self.prefetch_slots)] for group in (0, 1)},
            tracker=HitTracker(self.initial_hit_rate, self.hit_window),
        )

    def run(self, policy: SchedulerPolicy) -> Timeline:
        state = self._initial_state()
        planner = self._oracle_planner if policy.kind == PolicyKind.ORACLE else self._policy_planner(policy)
        for index in range(len(self.workload.instances)):
            context = self._prepare(state, index)
            plan = planner(state, context)
            self._execute(state, context, plan)
            state.plans.append(f"{index}: split={plan.split_index} prefetch={plan.issued_prefetches} {plan.decision.dump()}")

        instances = self.workload.instances
        return Timeline(
            events=tuple(sorted(state.events, key=TimelineEvent.sort_key)),
            t_io=self.params.t_io,
            instance_layers=tuple(inst.layer for inst in instances),
            layer_bounds=tuple(state.bounds),
            activated=tuple(
                (index, expert, tokens)
                for index, inst in enumerate(instances)
                for expert, tokens in sorted(inst.loads.items())
            ),
            resident=self.resident,
            output_tokens=self.workload.output_tokens,
            num_iterations=self.workload.num_iterations,
            prefetch=PrefetchCounts(state.issued, state.hits, state.dropped),
            plans=tuple(state.plans),
        )

    ############################################################################

    def _predicted_inputs(self, state: _PipelineState, index: int, depth: int) -> tuple[dict[int, int], LayerGroup] | None:
        target = index + depth
        if target >= len(self.workload.instances):
            return None
        inst = self.workload.instances[target]
        predicted = inst.predicted if depth == 1 else inst.predicted_far
        inflight = {record.expert for record in state.inflight.get(target, [])}
        remaining = {
            expert: tokens
            for expert, tokens in predicted.items()
            if (inst.layer, expert) not in self.resident and expert not in inflight
        }
        return remaining, inst.group

    def _prepare(self, state: _PipelineState, index: int, loads: dict[int, int] | None = None) -> _LayerContext:
        """Start instance `index`; `loads` replaces its gating truth when replaying a prediction."""
        inst = self.workload.instances[index]
        loads = inst.loads if loads is None else loads
        start = state.barrier
        attention_end = start + self.params.t_attn
        state.events.append(TimelineEvent(start, attention_end, Resource.GPU, EventKind.ATTENTION, index))

        prefetched = tuple(state.inflight.pop(index, []))
        by_expert = {record.expert: record for record in prefetched}
        if prefetched:
            critical = prefetched[-1]
            state.tracker.observe(inst.group, critical.expert in loads)
            state.hits += sum(record.expert in loads for record in prefetched)

        ready_jobs = []
        host = {}
        for expert, tokens in sorted(loads.items()):
            if (inst.layer, expert) in self.resident:
                ready_jobs.append((attention_end, -1, expert, tokens, None))
            elif expert in by_expert:
                record = by_expert[expert]
                ready_jobs.append((max(attention_end, record.t_end), record.t_end, expert, tokens, record))
            else:
                host[expert] = tokens
        ready_jobs.sort(key=lambda job: (job[0], job[1], job[2]))

        alpha = max(0, state.io_free - attention_end)
        near = self._predicted_inputs(state, index, 1)
        far = self._predicted_inputs(state, index, 2)
        next_layer = self.workload.instances[index + 1].layer if near else inst.layer
        far_layer = self.workload.instances[index + 2].layer if far else inst.layer
        inputs = LayerInputs(
            e_cur=loads_from_counts(host, inst.layer),
            e_next=loads_from_counts(near[0], next_layer) if near else (),
            params=self.params.with_alpha(alpha),
            stats=state.tracker.stats(near[1] if near else inst.group),
            e_next2=loads_from_counts(far[0], far_layer) if far else None,
            stats_far=state.tracker.stats(far[1]) if far else None,
        )
        return _LayerContext(index, attention_end, inputs, tuple(ready_jobs), prefetched)

    def _execute(self, state: _PipelineState, context: _LayerContext, plan: LayerPlan) -> None:
        index, attention_end = context.index, context.attention_end
        params = self.params

        cpu_end = attention_end
        for load in plan.cpu_set:
            lane = min(range(self.cpu_slots), key=lambda slot: (state.cpu_free[slot], slot))
            begin = max(attention_end, state.cpu_free[lane])
            end = begin + cpu_cost(load.tokens, params)
            state.events.append(
                TimelineEvent(begin, end, Resource.CPU, EventKind.CPU_EXPERT, index, load.expert, load.tokens, lane),
            )
            state.cpu_free[lane] = end
            cpu_end = max(cpu_end, end)

        cursor = attention_end
        released: list[tuple[_Prefetched, int]] = []
        for ready, _, expert, tokens, record in context.ready_jobs:
            begin = max(cursor, ready)
            cursor = begin + params.t_g
            state.events.append(TimelineEvent(begin, cursor, Resource.GPU, EventKind.GPU_EXPERT, index, expert, tokens))
            if record is not None:
                released.append((record, cursor))

        for position, load in enumerate(plan.ondemand_seq):
            slot = position % 2
            job = TransferJob(load.expert, index, TransferKind.ONDEMAND, params.t_io)
            begin = max(state.io_free, attention_end, state.ondemand_free[slot])
            state.io_free = job.finish(begin)
            state.events.append(
                TimelineEvent(begin, state.io_free, Resource.IO, EventKind.LOAD, index, load.expert, load.tokens, slot),
            )
            gpu_begin = max(cursor, state.io_free)
            cursor = gpu_begin + params.t_g
            state.events.append(
                TimelineEvent(gpu_begin, cursor, Resource.GPU, EventKind.GPU_EXPERT, index, load.expert, load.tokens),
            )
            state.ondemand_free[slot] = cursor

        layer_end = max(attention_end, cpu_end, cursor)

        slots = state.prefetch_slots[index % 2]
        for record in context.prefetched:
            release = next((at for held, at in released if held is record), layer_end)
            slots[record.slot] = [release, None]

        self._issue_prefetches(state, context, plan, layer_end)

        state.bounds.append((state.barrier, attention_end, layer_end))
        state.barrier = layer_end

    def _issue_prefetches(self, state: _PipelineState, context: _LayerContext, plan: LayerPlan, layer_end: int) -> None:
        target = context.index + plan.prefetch_depth
        if not plan.prefetch_seq or target >= len(self.workload.instances):
            return

        slots = state.prefetch_slots[target % 2]
        for load in plan.prefetch_seq:
            free = [position for position, (_, holder) in enumerate(slots) if holder is None]
            if not free:
                message = (
                    f"Prefetch of expert {load.expert} for layer instance {target} needs a buffer slot, "
                    f"all {len(slots)} are in use"
                )
                raise BufferOverflowError(message)
            slot = min(free, key=lambda position: (slots[position][0], position))
            slot_free = slots[slot][0]
            assert slot_free is not None

            begin = max(state.io_free, context.attention_end, slot_free)
            if begin >= layer_end:
                # A prefetch may not start once the issuing layer finished computing
                state.dropped += 1
                logger.debug(f"Dropped prefetch of expert {load.expert} for instance {target} at {begin}")
                continue

            job = TransferJob(load.expert, target, TransferKind.PREFETCH, self.params.t_io)
            end = job.finish(begin)
            state.io_free = end
            state.events.append(
                TimelineEvent(begin, end, Resource.IO, EventKind.PREFETCH, target, load.expert, load.tokens, slot),
            )
            slots[slot] = [end, target]
            state.inflight.setdefault(target, []).append(_Prefetched(load.expert, end, slot, plan.prefetch_depth))
            state.issued += 1

    ############################################################################

    def _policy_planner(self, policy: SchedulerPolicy) -> Planner:
        if policy.kind == PolicyKind.PRESCHED:
            return self._presched_planner

        def planner(state: _PipelineState, context: _LayerContext) -> LayerPlan:
            return plan_layer(policy, context.inputs)

        return planner

    def _presched_planner(self, state: _PipelineState, context: _LayerContext) -> LayerPlan:
        """
        Prefetch-aware plan, checked by replaying this layer and the predicted next one against
        loading the layer on demand and against issuing one more prefetch.
        """
        plan = schedule_layer(context.inputs)
        if plan.split_index == 0 and not plan.prefetch_seq:
            return plan

        fallback = ondemand_only(context.inputs)
        candidates = [replace(fallback, decision=replace(plan.decision, fallback=True))]
        extra = plan_from_split(
            context.inputs,
            plan.split_index,
            plan.issued_prefetches + 1,
            plan.prefetch_depth,
            plan.decision,
        )
        if extra.issued_prefetches > plan.issued_prefetches:
            candidates.append(extra)

        best, best_finish = plan, self._replay(state, context, plan)
        for candidate in candidates:
            try:
                finish = self._replay(state, context, candidate)
            except BufferOverflowError:
                # The extra prefetch may not fit the buffers
                continue
            if finish < best_finish:
                best, best_finish = candidate, finish
        if best is not plan:
            logger.debug(
                f"Instance {context.index}: split={best.split_index} prefetch={best.issued_prefetches} "
                f"replays faster than split={plan.split_index} prefetch={plan.issued_prefetches}",
            )
        return best

    def _replay(self, state: _PipelineState, context: _LayerContext, plan: LayerPlan) -> int:
        trial = state.fork()
        self._execute(trial, context, plan)
        following = context.index + 1
        if following >= len(self.workload.instances):
            return trial.barrier

        # Only the prediction of the next layer is known at this point
        upcoming = self._prepare(trial, following, loads=self.workload.instances[following].predicted)
        finishes = []
        for candidate in (schedule_layer(upcoming.inputs), ondemand_only(upcoming.inputs)):
            attempt = trial.fork()
            self._execute(attempt, upcoming, candidate)
            finishes.append(attempt.barrier)
        return min(finishes)

    def _oracle_planner(self, state: _PipelineState, context: _LayerContext) -> LayerPlan:
        def evaluate(plan: LayerPlan) -> int:
            trial = state.fork()
            self._execute(trial, context, plan)
            following = context.index + 1
            if following >= len(self.workload.instances):
                return trial.barrier

            trial_context = self._prepare(trial, following)
            best = None
            for split in range(len(trial_context.inputs.e_cur) + 1):
                attempt = trial.fork()
                self._execute(attempt, trial_context, plan_from_split(trial_context.inputs, split, 0))
                best = attempt.barrier if best is None else min(best, attempt.barrier)
            assert best is not None
            return best

        return enumeration_oracle(context.inputs, evaluate).plan


################################################################################


def build_workload(trace: Trace, predictor: "RoutingPredictor", seed: int) -> Workload:
    spec = trace.spec
    instances = []
    for iteration in range(trace.num_iterations):
        for layer in range(spec.num_layers):
            first = iteration == 0 and layer == 0
            second = iteration == 0 and layer <= 1
            instances.append(
                Instance(
                    layer=layer,
                    loads=trace.layer_loads(iteration, layer),
                    predicted={} if first else predictor.predict_counts(trace, iteration, layer, 1, seed),
                    predicted_far={} if second else predictor.predict_counts(trace, iteration, layer, 2, seed),
                    group=spec.group_of(layer),
                ),
            )
    return Workload(tuple(instances), trace.num_tokens, trace.num_iterations)


def prefetch_slot_count(settings: SimulatorConfig | DictConfig, spec: ModelSpec, workload: Workload) -> int:
    """Configured prefetch buffers per layer parity, or enough for the widest prediction."""
    if settings.prefetch_slots is not None:
        return int(settings.prefetch_slots)
    return max(spec.top_k, workload.widest_prediction)


def simulate(
    trace: Trace,
    policy: SchedulerPolicy,
    predictor: "RoutingPredictor",
    params: CostParams,
    residency: frozenset[tuple[int, int]] = frozenset(),
    seed: int = 0,
    settings: SimulatorConfig | DictConfig | None = None,
) -> tuple[Timeline, "Metrics"]:
    if predictor.spec != trace.spec:
        message = "Predictor and trace were built for different model shapes"
        raise ShapeMismatchError(message)
    settings = settings or SimulatorConfig()

    workload = build_workload(trace, predictor, seed)
    simulator = PipelineSimulator(
        workload,
        params,
        resident=residency,
        cpu_slots=settings.cpu_slots,
        prefetch_slots=prefetch_slot_count(settings, trace.spec, workload),
        initial_hit_rate=predictor.validation_hit_rate,
        hit_window=settings.hit_window,
    )
    timeline = simulator.run(policy)
    logger.debug(f"Simulated {policy} over {len(timeline.layer_bounds)} layer instances")
    return timeline, compute_metrics(timeline, trace)


################################################################################


@dataclass(frozen=True)
class Violation:
    rule: str
    detail: str


def _overlaps(events: list[TimelineEvent], rule: str) -> list[Violation]:
    violations = []
    latest: TimelineEvent | None = None
    for event in sorted(events, key=TimelineEvent.sort_key):
        if latest is not None and event.t_start < latest.t_end:
            violations.append(Violation(rule, f"{event.to_record()} overlaps {latest.to_record()}"))
        if latest is None or event.t_end > latest.t_end:
            latest = event
    return violations


def _instance_at(bounds: tuple[tuple[int, int, int], ...], tick: int) -> int | None:
    return next((index for index, (start, _, end) in enumerate(bounds) if start <= tick < end), None)


def verify_timeline(timeline: Timeline) -> list[Violation]:
    events = timeline.events
    violations: list[Violation] = []

    transfers = [event for event in events if event.kind in TRANSFER_KINDS]
    violations += _overlaps(transfers, "serial-io")
    violations += _overlaps([event for event in events if event.resource == Resource.GPU], "gpu-overlap")
    for lane in {event.lane for event in events if event.resource == Resource.CPU}:
        cpu_events = [event for event in events if event.resource == Resource.CPU and event.lane == lane]
        violations += _overlaps(cpu_events, "cpu-overlap")

    for event in transfers:
        if event.t_end - event.t_start != timeline.t_io:
            violations.append(Violation("non-interruptible", f"{event.to_record()} does not last t_io={timeline.t_io}"))
        if event.kind == EventKind.PREFETCH and timeline.layer_bounds:
            issuer = _instance_at(timeline.layer_bounds, event.t_start)
            if issuer is None or not 1 <= event.layer - issuer <= 2:
                violations.append(
                    Violation("prefetch-issue", f"{event.to_record()} starts after its issuing layer finished"),
                )

    computed = Counter(
        (event.layer, event.expert, event.tokens) for event in events if event.kind in COMPUTE_KINDS
    )
    expected = Counter(timeline.activated)
    for key in sorted((computed | expected).keys(), key=str):
        if computed[key] != expected[key]:
            violations.append(
                Violation("conservation", f"(instance, expert, tokens)={key} computed {computed[key]} times, expected {expected[key]}"),
            )

    arrivals: dict[tuple[int, int], list[TimelineEvent]] = defaultdict(list)
    for event in transfers:
        assert event.expert is not None
        arrivals[(event.layer, event.expert)].append(event)
    gpu_end: dict[tuple[int, int], int] = {}
    for event in events:
        if event.kind != EventKind.GPU_EXPERT:
            continue
        assert event.expert is not None
        key = (event.layer, event.expert)
        gpu_end[key] = event.t_end
        layer = timeline.instance_layers[event.layer] if event.layer < len(timeline.instance_layers) else event.layer
        if (layer, event.expert) in timeline.resident:
            continue
        if not any(transfer.t_end <= event.t_start for transfer in arrivals[key]):
            violations.append(Violation("causality", f"{event.to_record()} runs before its weights arrived"))

    buffers: dict[tuple[str, int, int], list[TimelineEvent]] = defaultdict(list)
    for event in transfers:
        group = 0 if event.kind == EventKind.LOAD else event.layer % 2
        buffers[(event.kind.value, group, event.lane)].append(event)
    for slot_events in buffers.values():
        slot_events.sort(key=TimelineEvent.sort_key)
        for previous, current in zip(slot_events, slot_events[1:], strict=False):
            assert previous.expert is not None
            release = gpu_end.get((previous.layer, previous.expert))
            if release is None and previous.layer < len(timeline.layer_bounds):
                release = timeline.layer_bounds[previous.layer][2]
            if release is not None and current.t_start < release:
                violations.append(
                    Violation("buffer", f"{current.to_record()} overwrites a slot still holding {previous.to_record()}"),
                )

    return violations


################################################################################


@dataclass(frozen=True)
class Metrics:
    makespan: int
    decode_latency: float
    throughput: float
    io_busy_fraction: float
    gpu_idle_fraction: float
    layer_latency: tuple[int, ...]
    cpu_gpu_gap: tuple[int, ...]
    prefetch_issued: int = 0
    prefetch_hits: int = 0
    prefetch_dropped: int = 0

    def to_record(self) -> dict[str, Any]:
        return {
            "makespan": self.makespan,
            "decode_latency": self.decode_latency,
            "throughput": self.throughput,
            "io_busy_fraction": self.io_busy_fraction,
            "gpu_idle_fraction": self.gpu_idle_fraction,
            "layer_latency": list(self.layer_latency),
            "cpu_gpu_gap": list(self.cpu_gpu_gap),
            "prefetch_issued": self.prefetch_issued,
            "prefetch_hits": self.prefetch_hits,
            "prefetch_dropped": self.prefetch_dropped,
        }


def gpu_idle_intervals(timeline: Timeline) -> list[TimelineEvent]:
    makespan = max((event.t_end for event in timeline.events), default=0)
    idle, cursor = [], 0
    for event in sorted((e for e in timeline.events if e.resource == Resource.GPU), key=TimelineEvent.sort_key):
        if event.t_start > cursor:
            layer = _instance_at(timeline.layer_bounds, cursor)
            idle.append(TimelineEvent(cursor, event.t_start, Resource.GPU, EventKind.IDLE, layer or 0))
        cursor = max(cursor, event.t_end)
    if cursor < makespan:
        layer = _instance_at(timeline.layer_bounds, cursor)
        idle.append(TimelineEvent(cursor, makespan, Resource.GPU, EventKind.IDLE, layer or 0))
    return idle


def compute_metrics(timeline: Timeline, trace: Trace | None = None) -> Metrics:
    events = timeline.events
    makespan = max((event.t_end for event in events), default=0)
    iterations = trace.num_iterations if trace is not None else timeline.num_iterations
    output_tokens = trace.num_tokens if trace is not None else timeline.output_tokens

    io_busy = sum(event.t_end - event.t_start for event in events if event.kind in TRANSFER_KINDS)
    gpu_idle = sum(event.t_end - event.t_start for event in gpu_idle_intervals(timeline))

    finish: dict[tuple[int, Resource], int] = {}
    for event in events:
        if event.resource == Resource.IO:
            continue
        key = (event.layer, event.resource)
        finish[key] = max(finish.get(key, 0), event.t_end)
    gaps = []
    for index, (_, attention_end, _) in enumerate(timeline.layer_bounds):
        cpu_finish = finish.get((index, Resource.CPU), attention_end)
        gpu_finish = finish.get((index, Resource.GPU), attention_end)
        gaps.append(abs(cpu_finish - gpu_finish))

    return Metrics(
        makespan=makespan,
        decode_latency=makespan / max(iterations, 1),
        throughput=output_tokens * 1e6 / makespan if makespan else 0.0,
        io_busy_fraction=io_busy / makespan if makespan else 0.0,
        gpu_idle_fraction=gpu_idle / makespan if makespan else 0.0,
        layer_latency=tuple(end - start for start, _, end in timeline.layer_bounds),
        cpu_gpu_gap=tuple(gaps),
        prefetch_issued=timeline.prefetch.issued,
        prefetch_hits=timeline.prefetch.hits,
        prefetch_dropped=timeline.prefetch.dropped,
    )


def write_timeline(timeline: Timeline, path: Path) -> None:
    header = {"format_version": TIMELINE_FORMAT_VERSION, "tick_unit": TICK_UNIT, "t_io": timeline.t_io}
    lines = [json.dumps(header)] + [json.dumps(record) for record in timeline.records()]
    write_text_atomic(path, "\n".join(lines) + "\n")


def write_metrics(metrics: Metrics, path: Path) -> None:
    write_text_atomic(path, json.dumps(metrics.to_record(), indent=2, sort_keys=True) + "\n")
