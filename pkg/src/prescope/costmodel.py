import csv
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from itertools import accumulate
from pathlib import Path
from typing import Any, NamedTuple

import jsonschema
import numpy as np
from omegaconf import DictConfig

from prescope.config import CostConfig
from prescope.constants import TICK_UNIT
from prescope.errors import CalibrationError, ConfigError
from prescope.utils import round_half_up, write_text_atomic

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostParams:
    """Latency constants in integer ticks (microseconds); `beta` and `startup` define the CPU line."""

    t_io: int
    t_g: int
    t_attn: int
    beta: float
    startup: float
    alpha: int = 0

    def __post_init__(self) -> None:
        for name in ("t_io", "t_g", "t_attn", "beta", "startup", "alpha"):
            if getattr(self, name) < 0:
                message = f"{name} must be >= 0, got {getattr(self, name)}"
                raise ValueError(message)
        if self.t_g >= self.t_io:
            message = f"t_g ({self.t_g}) must be smaller than t_io ({self.t_io})"
            raise ValueError(message)

    def with_alpha(self, alpha: int) -> "CostParams":
        return replace(self, alpha=max(0, alpha))

    def to_record(self) -> dict[str, Any]:
        return {
            "t_io": self.t_io,
            "t_g": self.t_g,
            "t_attn": self.t_attn,
            "beta": self.beta,
            "startup": self.startup,
            "tick_unit": TICK_UNIT,
        }


class Location(Enum):
    RESIDENT = "resident"
    IN_FLIGHT = "in_flight"
    HOST = "host"


@dataclass(frozen=True)
class ExpertLoad:
    expert: int
    layer: int
    tokens: int
    location: Location = Location.HOST

    def __post_init__(self) -> None:
        if self.tokens < 1:
            message = f"Expert {self.expert} of layer {self.layer} needs >= 1 token, got {self.tokens}"
            raise ValueError(message)


@dataclass(frozen=True)
class HitStats:
    r_hit: float
    r_miss: float
    window: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.r_hit <= 1.0 and 0.0 <= self.r_miss <= 1.0):
            message = f"Hit and miss rates must lie in [0, 1], got {self.r_hit}, {self.r_miss}"
            raise ValueError(message)
        if abs(self.r_hit + self.r_miss - 1.0) > 1e-9:
            message = f"Hit and miss rates must sum to 1, got {self.r_hit} + {self.r_miss}"
            raise ValueError(message)

    @classmethod
    def from_hit_rate(cls, r_hit: float, window: int = 0) -> "HitStats":
        return cls(r_hit, 1.0 - r_hit, window)


################################################################################


def cpu_cost(tokens: int, params: CostParams) -> int:
    return round_half_up(params.beta * tokens + params.startup)


def cpu_cost_list(loads: Sequence[ExpertLoad | int], params: CostParams) -> int:
    return sum(cpu_cost(_tokens(load), params) for load in loads)


def cpu_prefix_costs(loads: Sequence[ExpertLoad | int], params: CostParams) -> list[int]:
    """Element `i` is the CPU cost of `loads[0:i]`; one entry longer than `loads`."""
    return list(accumulate((cpu_cost(_tokens(load), params) for load in loads), initial=0))


def _tokens(load: ExpertLoad | int) -> int:
    return load.tokens if isinstance(load, ExpertLoad) else load


class CalibrationFit(NamedTuple):
    beta: float
    startup: float
    r_squared: float


def fit_cost_params(samples: Sequence[tuple[int, int | float]]) -> CalibrationFit:
    tokens = np.array([m for m, _ in samples], dtype=np.float64)
    ticks = np.array([t for _, t in samples], dtype=np.float64)
    if len(np.unique(tokens)) < 2:
        message = "Calibration needs at least two distinct token counts"
        raise CalibrationError(message)

    design = np.column_stack([tokens, np.ones_like(tokens)])
    (beta, startup), *_ = np.linalg.lstsq(design, ticks, rcond=None)

    residual = float(np.sum((ticks - design @ np.array([beta, startup])) ** 2))
    total = float(np.sum((ticks - ticks.mean()) ** 2))
    r_squared = 1.0 if total == 0.0 else min(1.0, max(0.0, 1.0 - residual / total))

    logger.debug(f"Fitted beta={beta}, startup={startup}, R^2={r_squared} on {len(samples)} samples")
    return CalibrationFit(float(beta), float(startup), r_squared)


def cross_layer_costs(i: int, e_all: Sequence[ExpertLoad], params: CostParams) -> tuple[int, int]:
    """GPU cost of loading `e_all[i:]` against CPU cost of computing `e_all[:i+1]` plus attention."""
    if not 0 <= i < len(e_all):
        message = f"Index {i} outside [0, {len(e_all)})"
        raise IndexError(message)
    t_g_all = params.alpha + (len(e_all) - i) * params.t_io + params.t_g
    t_c_all = cpu_cost_list(e_all[: i + 1], params) + params.t_attn
    return t_g_all, t_c_all


def current_layer_costs(i_prime: int, e_cur: Sequence[ExpertLoad], params: CostParams) -> tuple[int, int]:
    if not 0 <= i_prime <= len(e_cur):
        message = f"Split index {i_prime} outside [0, {len(e_cur)}]"
        raise IndexError(message)
    t_g = params.alpha + (len(e_cur) - i_prime) * params.t_io + params.t_g
    t_c = cpu_cost_list(e_cur[:i_prime], params)
    return t_g, t_c


def overlap_prefetch_count(t_gap: int, params: CostParams) -> tuple[Fraction, int]:
    f = Fraction(t_gap + params.t_attn, params.t_io)
    return f, round_half_up(max(f, Fraction(0)))


def prefetch_gain(stats: HitStats, f: Fraction | float, f_int: int, params: CostParams) -> float:
    # The per-expert transfer time doubles as the critical prefetch's benefit unit
    t_e = params.t_io
    f = float(f)
    return stats.r_hit * (f - f_int + 1) * t_e - stats.r_miss * (f_int - f) * t_e


################################################################################

CALIBRATION_SCHEMA = {
    "type": "object",
    "required": ["t_io", "t_g", "t_attn", "beta", "startup", "tick_unit"],
    "properties": {
        "t_io": {"type": "integer", "minimum": 1},
        "t_g": {"type": "integer", "minimum": 0},
        "t_attn": {"type": "integer", "minimum": 0},
        "beta": {"type": "number", "minimum": 0},
        "startup": {"type": "number", "minimum": 0},
        "tick_unit": {"const": TICK_UNIT},
    },
}


def read_samples(path: Path) -> list[tuple[int, float]]:
    try:
        with path.open(newline="", encoding="utf-8") as f:
            return [(int(row["tokens"]), float(row["ticks"])) for row in csv.DictReader(f)]
    except (KeyError, ValueError) as e:
        message = f"Samples file '{path}' needs numeric 'tokens' and 'ticks' columns: {e}"
        raise CalibrationError(message) from e


def write_calibration(params: CostParams, path: Path) -> None:
    write_text_atomic(path, json.dumps(params.to_record(), indent=2, sort_keys=True) + "\n")
    logger.info(f"Wrote calibration to '{path}'")


def read_calibration(path: Path) -> CostParams:
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
        jsonschema.validate(record, CALIBRATION_SCHEMA)
        return CostParams(
            t_io=record["t_io"],
            t_g=record["t_g"],
            t_attn=record["t_attn"],
            beta=record["beta"],
            startup=record["startup"],
        )
    except (json.JSONDecodeError, jsonschema.ValidationError, ValueError) as e:
        message = f"Invalid calibration file '{path}': {e}"
        raise CalibrationError(message) from e


def params_from_config(config: CostConfig | DictConfig) -> CostParams:
    if config.calibration_file:
        return read_calibration(Path(config.calibration_file))
    try:
        return CostParams(
            t_io=config.t_io,
            t_g=config.t_g,
            t_attn=config.t_attn,
            beta=config.beta,
            startup=config.startup,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
