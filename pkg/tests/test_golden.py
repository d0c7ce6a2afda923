import pytest

from prescope.errors import UnknownScenarioError
from prescope.golden import GoldenDiff, list_scenarios, load_scenario, replay_golden, run_scenario
from prescope.policytype import PolicyKind
from prescope.simulator import compute_metrics


def test_scenarios_are_listed_in_natural_order() -> None:
    scenarios = list_scenarios()
    assert len(scenarios) == 7
    assert scenarios == sorted(scenarios)
    assert "cross-layer-presched" in scenarios


@pytest.mark.parametrize("scenario_id", list_scenarios())
def test_golden_scenario_replays(scenario_id: str) -> None:
    diff = replay_golden(scenario_id)
    assert diff.passed, diff.render()
    assert diff.render() == f"{scenario_id}: ok (makespan {diff.actual_makespan})"


@pytest.mark.parametrize(
    ("better", "worse"),
    [
        ("cross-layer-presched", "cross-layer-greedy"),
        ("cross-layer-greedy", "cross-layer-ondemand"),
        ("presched-cpu-bound", "greedy-cpu-bound"),
    ],
)
def test_scenario_orderings(better: str, worse: str) -> None:
    assert load_scenario(better).makespan < load_scenario(worse).makespan


def test_cpu_bound_presched_prefetches_only_the_hot_expert() -> None:
    scenario = load_scenario("presched-cpu-bound")
    assert scenario.policy.kind == PolicyKind.PRESCHED
    timeline = run_scenario(scenario)
    prefetched = [event.expert for event in timeline.events if event.kind.value == "prefetch"]
    assert prefetched == [4]
    assert compute_metrics(timeline).makespan == 18


def test_mispredicted_plan_falls_back_to_ondemand() -> None:
    diff = replay_golden("cross-layer-mispredicted")
    assert diff.passed
    assert diff.actual_makespan > load_scenario("cross-layer-presched").makespan


def test_unknown_scenario() -> None:
    with pytest.raises(UnknownScenarioError, match="expected one of"):
        load_scenario("does-not-exist")


def test_failed_diff_rendering() -> None:
    diff = GoldenDiff(
        "demo",
        expected_makespan=18,
        actual_makespan=20,
        missing=[[0, 2, "gpu", "attention", 0, None, 0]],
        unexpected=[[0, 4, "gpu", "attention", 0, None, 0]],
    )
    assert not diff.passed
    assert diff.render().splitlines() == [
        "demo: makespan expected 18, got 20",
        "  - [0, 2, 'gpu', 'attention', 0, None, 0]",
        "  + [0, 4, 'gpu', 'attention', 0, None, 0]",
    ]
