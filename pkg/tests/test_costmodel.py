import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prescope.costmodel import (
    CostParams,
    ExpertLoad,
    HitStats,
    cpu_cost,
    cpu_cost_list,
    cpu_prefix_costs,
    cross_layer_costs,
    current_layer_costs,
    fit_cost_params,
    overlap_prefetch_count,
    prefetch_gain,
    read_calibration,
    read_samples,
    write_calibration,
)
from prescope.errors import CalibrationError

PARAMS = CostParams(t_io=4000, t_g=500, t_attn=3000, beta=50.0, startup=2000.0)


def loads(*tokens: int, layer: int = 0) -> list[ExpertLoad]:
    return [ExpertLoad(expert, layer, m) for expert, m in enumerate(tokens)]


def test_cost_params_invariants() -> None:
    with pytest.raises(ValueError, match="t_g"):
        CostParams(t_io=10, t_g=10, t_attn=0, beta=1.0, startup=0.0)
    with pytest.raises(ValueError, match="beta"):
        CostParams(t_io=10, t_g=2, t_attn=0, beta=-1.0, startup=0.0)
    assert PARAMS.with_alpha(-5).alpha == 0


def test_expert_load_needs_tokens() -> None:
    with pytest.raises(ValueError, match="token"):
        ExpertLoad(expert=0, layer=0, tokens=0)


def test_hit_stats_must_sum_to_one() -> None:
    assert HitStats.from_hit_rate(0.9).r_miss == pytest.approx(0.1)
    with pytest.raises(ValueError, match="sum to 1"):
        HitStats(0.5, 0.4)


####################################################################################################


def test_cpu_cost() -> None:
    assert cpu_cost(0, PARAMS) == 2000
    assert cpu_cost(40, PARAMS) == 4000


def test_cpu_cost_rounds_half_up() -> None:
    params = CostParams(t_io=10, t_g=2, t_attn=0, beta=0.5, startup=0.0)
    assert cpu_cost(1, params) == 1
    assert cpu_cost(3, params) == 2


def test_cpu_cost_list_is_additive() -> None:
    experts = loads(1, 5, 9, 40)
    assert cpu_cost_list(experts, PARAMS) == sum(cpu_cost(load.tokens, PARAMS) for load in experts)
    assert cpu_cost_list(experts, PARAMS) == cpu_cost_list(experts[:2], PARAMS) + cpu_cost_list(experts[2:], PARAMS)
    assert cpu_cost_list([], PARAMS) == 0


def test_cpu_prefix_costs() -> None:
    experts = loads(1, 5, 9)
    prefix = cpu_prefix_costs(experts, PARAMS)
    assert len(prefix) == 4
    assert prefix == [cpu_cost_list(experts[:i], PARAMS) for i in range(4)]


####################################################################################################


def test_fit_exact_line() -> None:
    fit = fit_cost_params([(m, 50 * m + 2000) for m in range(1, 65)])
    assert fit.beta == pytest.approx(50.0)
    assert fit.startup == pytest.approx(2000.0)
    assert fit.r_squared == pytest.approx(1.0)


def test_fit_two_points() -> None:
    fit = fit_cost_params([(1, 100), (2, 150)])
    assert fit.beta == pytest.approx(50.0)
    assert fit.startup == pytest.approx(50.0)


def test_fit_noisy_line_matches_closed_form() -> None:
    rng = np.random.default_rng(7)
    tokens = np.arange(1, 65)
    ticks = (50 * tokens + 2000) * (1 + 0.01 * rng.standard_normal(64))
    fit = fit_cost_params(list(zip(tokens.tolist(), ticks.tolist(), strict=True)))

    mean_m, mean_t = tokens.mean(), ticks.mean()
    beta = np.sum((tokens - mean_m) * (ticks - mean_t)) / np.sum((tokens - mean_m) ** 2)
    startup = mean_t - beta * mean_m
    assert fit.beta == pytest.approx(beta, rel=1e-9)
    assert fit.startup == pytest.approx(startup, rel=1e-9)
    assert fit.beta == pytest.approx(50.0, rel=0.02)
    assert fit.startup == pytest.approx(2000.0, rel=0.02)
    assert 0.0 <= fit.r_squared <= 1.0


def test_fit_degenerate_samples() -> None:
    with pytest.raises(CalibrationError, match="two distinct"):
        fit_cost_params([(8, 100), (8, 120)])


def test_calibration_file_round_trip(tmp_path: Path) -> None:
    path = tmp_path / "calibration.json"
    write_calibration(PARAMS, path)
    assert read_calibration(path) == PARAMS


def test_calibration_file_rejects_missing_fields(tmp_path: Path) -> None:
    path = tmp_path / "calibration.json"
    path.write_text(json.dumps({"t_io": 10}))
    with pytest.raises(CalibrationError):
        read_calibration(path)


def test_read_samples(tmp_path: Path) -> None:
    path = tmp_path / "samples.csv"
    path.write_text("tokens,ticks\n1,100\n2,150.5\n")
    assert read_samples(path) == [(1, 100.0), (2, 150.5)]

    path.write_text("m,t\n1,100\n")
    with pytest.raises(CalibrationError, match="tokens"):
        read_samples(path)


####################################################################################################


def test_cross_layer_costs_direct() -> None:
    params = CostParams(t_io=10, t_g=2, t_attn=3, beta=1.0, startup=5.0)
    assert cross_layer_costs(0, loads(100), params) == (12, 108)

    t_g_all, t_c_all = cross_layer_costs(0, loads(100), params.with_alpha(6))
    assert (t_g_all, t_c_all) == (18, 108)


def test_cross_layer_costs_index_range() -> None:
    with pytest.raises(IndexError):
        cross_layer_costs(1, loads(3), PARAMS)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(min_value=1, max_value=500), min_size=1, max_size=12), st.integers(0, 20))
def test_mandatory_transfers_form_a_suffix(tokens: list[int], alpha: int) -> None:
    params = CostParams(t_io=40, t_g=5, t_attn=7, beta=1.0, startup=3.0, alpha=alpha)
    e_all = loads(*sorted(tokens))

    margins = [
        cross_layer_costs(i, e_all, params)[0] - cross_layer_costs(i, e_all, params)[1] for i in range(len(e_all))
    ]
    assert all(a >= b for a, b in zip(margins, margins[1:], strict=False))

    mandatory = [i for i, margin in enumerate(margins) if margin < 0]
    assert mandatory == list(range(len(e_all) - len(mandatory), len(e_all)))


def test_current_layer_costs() -> None:
    e_cur = loads(3, 8)
    assert current_layer_costs(2, e_cur, PARAMS) == (PARAMS.t_g, cpu_cost_list(e_cur, PARAMS))
    assert current_layer_costs(1, e_cur, PARAMS) == (PARAMS.t_io + PARAMS.t_g, cpu_cost(3, PARAMS))
    assert current_layer_costs(0, e_cur, PARAMS)[1] == 0
    with pytest.raises(IndexError):
        current_layer_costs(3, e_cur, PARAMS)


def test_overlap_prefetch_count() -> None:
    assert overlap_prefetch_count(5000, PARAMS) == (Fraction(2), 2)
    assert overlap_prefetch_count(-3000, PARAMS) == (Fraction(0), 0)
    assert overlap_prefetch_count(3000, PARAMS) == (Fraction(3, 2), 2)
    assert overlap_prefetch_count(-5000, PARAMS)[1] == 0


def test_prefetch_gain() -> None:
    assert prefetch_gain(HitStats(0.9, 0.1), 1.6, 2, PARAMS) == pytest.approx(2000.0)
    assert prefetch_gain(HitStats(1.0, 0.0), Fraction(7, 5), 1, PARAMS) > 0
    assert prefetch_gain(HitStats(0.3, 0.7), 2, 2, PARAMS) == pytest.approx(0.3 * PARAMS.t_io)


def test_prefetch_gain_increases_with_hit_rate() -> None:
    gains = [prefetch_gain(HitStats.from_hit_rate(r), 1.6, 2, PARAMS) for r in np.linspace(0, 1, 11)]
    assert all(a < b for a, b in zip(gains, gains[1:], strict=False))
    # Sign flips where r_hit * 0.6 == (1 - r_hit) * 0.4
    assert prefetch_gain(HitStats.from_hit_rate(0.39), 1.6, 2, PARAMS) < 0
    assert prefetch_gain(HitStats.from_hit_rate(0.41), 1.6, 2, PARAMS) > 0
