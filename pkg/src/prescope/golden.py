import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any

import yaml
from natsort import natsorted

from prescope.constants import GOLDEN_RESOURCE
from prescope.costmodel import CostParams
from prescope.errors import UnknownScenarioError
from prescope.policytype import SchedulerPolicy
from prescope.simulator import Instance, PipelineSimulator, Timeline, Workload, compute_metrics, verify_timeline
from prescope.utils import parse_policy

logger = logging.getLogger(__name__)

GOLDEN_SUFFIX = ".yml"


@dataclass(frozen=True)
class GoldenScenario:
    scenario_id: str
    description: str
    policy: SchedulerPolicy
    params: CostParams
    workload: Workload
    makespan: int
    events: list[list[Any]]


@dataclass(frozen=True)
class GoldenDiff:
    scenario_id: str
    expected_makespan: int
    actual_makespan: int
    missing: list[list[Any]] = field(default_factory=list)
    unexpected: list[list[Any]] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (
            self.expected_makespan == self.actual_makespan
            and not self.missing
            and not self.unexpected
            and not self.violations
        )

    def render(self) -> str:
        if self.passed:
            return f"{self.scenario_id}: ok (makespan {self.actual_makespan})"
        lines = [f"{self.scenario_id}: makespan expected {self.expected_makespan}, got {self.actual_makespan}"]
        lines += [f"  - {record}" for record in self.missing]
        lines += [f"  + {record}" for record in self.unexpected]
        lines += [f"  ! {violation}" for violation in self.violations]
        return "\n".join(lines)


def list_scenarios() -> list[str]:
    names = [entry.name for entry in GOLDEN_RESOURCE.iterdir() if entry.name.endswith(GOLDEN_SUFFIX)]
    return natsorted(name.removesuffix(GOLDEN_SUFFIX) for name in names)


def load_scenario(scenario_id: str) -> GoldenScenario:
    if scenario_id not in list_scenarios():
        message = f"Unknown golden scenario '{scenario_id}', expected one of: {', '.join(list_scenarios())}"
        raise UnknownScenarioError(message)

    record = yaml.safe_load(GOLDEN_RESOURCE.joinpath(scenario_id + GOLDEN_SUFFIX).read_text(encoding="utf-8"))
    instances = tuple(
        Instance(
            layer=index,
            loads={int(expert): int(tokens) for expert, tokens in layer["loads"].items()},
            predicted={int(expert): int(tokens) for expert, tokens in layer.get("predicted", {}).items()},
        )
        for index, layer in enumerate(record["layers"])
    )
    return GoldenScenario(
        scenario_id=scenario_id,
        description=record["description"],
        policy=parse_policy(record["policy"]),
        params=CostParams(**record["params"]),
        workload=Workload(instances, output_tokens=1, num_iterations=1),
        makespan=record["makespan"],
        events=record["events"],
    )


def run_scenario(scenario: GoldenScenario) -> Timeline:
    return PipelineSimulator(scenario.workload, scenario.params).run(scenario.policy)


def replay_golden(scenario_id: str) -> GoldenDiff:
    scenario = load_scenario(scenario_id)
    timeline = run_scenario(scenario)
    actual = timeline.records()

    expected_counts = Counter(tuple(record) for record in scenario.events)
    actual_counts = Counter(tuple(record) for record in actual)
    diff = GoldenDiff(
        scenario_id=scenario_id,
        expected_makespan=scenario.makespan,
        actual_makespan=compute_metrics(timeline).makespan,
        missing=[list(record) for record in (expected_counts - actual_counts).elements()],
        unexpected=[list(record) for record in (actual_counts - expected_counts).elements()],
        violations=[f"{violation.rule}: {violation.detail}" for violation in verify_timeline(timeline)],
    )
    if diff.passed and actual != scenario.events:
        diff.violations.append("events match as a set but not in canonical order")

    logger.debug(diff.render())
    return diff
