import hashlib
import json
import logging
import math
from collections import Counter
from collections.abc import Iterator
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np
import numpy.typing as npt
from omegaconf import DictConfig, OmegaConf

from prescope.config import GroupKnobs, ModelConfig, TraceGenConfig, check_trace_config
from prescope.constants import (
    DEFAULT_HIDDEN_DIM,
    FLOAT_DIGITS,
    FOLLOW_MARGIN,
    GATE_LOGIT_SCALE,
    GROUP_EDGE_LAYERS,
    MODEL_PRESETS,
    OFF_SUBSPACE_SHARE,
    ROUTING_RANK,
    TRACE_FORMAT_VERSION,
)
from prescope.errors import ConfigError, TraceFormatError, TraceIntegrityError
from prescope.utils import write_text_atomic

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]


class LayerGroup(Enum):
    INPUT = "input"
    MIDDLE = "middle"
    OUTPUT = "output"


def default_group_bounds(num_layers: int) -> tuple[int, int]:
    if num_layers > 2 * GROUP_EDGE_LAYERS:
        return (GROUP_EDGE_LAYERS, num_layers - GROUP_EDGE_LAYERS)
    edge = num_layers // 3
    return (edge, num_layers - edge)


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    experts_per_layer: int
    top_k: int
    expert_bytes: int
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    group_bounds: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        counts = {
            "num_layers": self.num_layers,
            "experts_per_layer": self.experts_per_layer,
            "top_k": self.top_k,
            "expert_bytes": self.expert_bytes,
            "hidden_dim": self.hidden_dim,
        }
        for name, value in counts.items():
            if value < 1:
                message = f"{name} must be >= 1, got {value}"
                raise ValueError(message)

        if self.top_k > self.experts_per_layer:
            message = f"top_k ({self.top_k}) exceeds experts_per_layer ({self.experts_per_layer})"
            raise ValueError(message)

        if self.group_bounds is None:
            object.__setattr__(self, "group_bounds", default_group_bounds(self.num_layers))
        else:
            object.__setattr__(self, "group_bounds", tuple(self.group_bounds))

        start, end = self.bounds
        if not 0 <= start < end <= self.num_layers:
            message = f"Group bounds {self.group_bounds} must be strictly increasing within [0, {self.num_layers}]"
            raise ValueError(message)

    @property
    def bounds(self) -> tuple[int, int]:
        assert self.group_bounds is not None
        return self.group_bounds

    def group_of(self, layer: int) -> LayerGroup:
        if not 0 <= layer < self.num_layers:
            message = f"Layer {layer} outside [0, {self.num_layers})"
            raise IndexError(message)
        start, end = self.bounds
        if layer < start:
            return LayerGroup.INPUT
        if layer < end:
            return LayerGroup.MIDDLE
        return LayerGroup.OUTPUT

    def layers_in(self, group: LayerGroup) -> range:
        start, end = self.bounds
        return {
            LayerGroup.INPUT: range(start),
            LayerGroup.MIDDLE: range(start, end),
            LayerGroup.OUTPUT: range(end, self.num_layers),
        }[group]

    def to_dict(self) -> dict[str, Any]:
        record = asdict(self)
        record["group_bounds"] = list(self.bounds)
        return record

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> "ModelSpec":
        bounds = record.get("group_bounds")
        return cls(**{**record, "group_bounds": tuple(bounds) if bounds is not None else None})

    @classmethod
    def from_preset(cls, name: str, **overrides: Any) -> "ModelSpec":
        if name not in MODEL_PRESETS:
            message = f"Unknown model preset '{name}', expected one of: {', '.join(MODEL_PRESETS)}"
            raise ValueError(message)
        values = {**MODEL_PRESETS[name], **{k: v for k, v in overrides.items() if v is not None}}
        return cls(**values)


def spec_from_config(config: ModelConfig | DictConfig) -> ModelSpec:
    overrides = {
        "num_layers": config.num_layers,
        "experts_per_layer": config.experts_per_layer,
        "top_k": config.top_k,
        "expert_bytes": config.expert_bytes,
        "hidden_dim": config.hidden_dim,
        "group_bounds": tuple(config.group_bounds) if config.group_bounds else None,
    }
    try:
        if config.preset:
            if config.preset.endswith("-desk"):
                logger.warning(f"Using desk-scale preset '{config.preset}'")
            return ModelSpec.from_preset(config.preset, **overrides)

        missing = [name for name, value in overrides.items() if value is None and name != "group_bounds"]
        if missing:
            message = f"Custom model is missing: {', '.join(missing)}"
            raise ConfigError(message)
        return ModelSpec(**overrides)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e


def trace_config_from(config: TraceGenConfig | DictConfig) -> TraceGenConfig:
    if isinstance(config, DictConfig):
        converted = OmegaConf.to_object(config)
        assert isinstance(converted, TraceGenConfig)
        return converted
    return config


################################################################################


@dataclass(frozen=True)
class TraceStep:
    token: int
    layer: int
    hidden: FloatArray
    gate_weights: FloatArray
    active_experts: tuple[int, ...]
    tokens_per_expert: dict[int, int] = field(default_factory=dict)


class Trace:
    """
    Routing record of `batch_size * num_iterations` tokens through every layer.

    Tokens of decode iteration `i` occupy rows `[i * batch_size, (i + 1) * batch_size)`.
    Arrays are read-only; `steps` yields the per-(token, layer) view.
    """

    def __init__(
        self,
        spec: ModelSpec,
        batch_size: int,
        seed: int,
        hidden: FloatArray,
        gate_weights: FloatArray,
        active: IntArray,
        num_iterations: int | None = None,
    ) -> None:
        num_tokens = hidden.shape[0]
        if num_iterations is None:
            num_iterations = num_tokens // batch_size if batch_size else 0

        expected = {
            "hidden": (num_tokens, spec.num_layers, spec.hidden_dim),
            "gate_weights": (num_tokens, spec.num_layers, spec.experts_per_layer),
            "active": (num_tokens, spec.num_layers, spec.top_k),
        }
        for name, array in (("hidden", hidden), ("gate_weights", gate_weights), ("active", active)):
            if array.shape != expected[name]:
                message = f"Trace {name} has shape {array.shape}, expected {expected[name]}"
                raise TraceFormatError(message)
        if batch_size * num_iterations != num_tokens:
            message = f"{num_tokens} tokens do not form {num_iterations} iterations of batch {batch_size}"
            raise TraceFormatError(message)

        self.spec = spec
        self.batch_size = batch_size
        self.seed = seed
        self.num_iterations = num_iterations
        self.hidden = np.ascontiguousarray(hidden, dtype=np.float64)
        self.gate_weights = np.ascontiguousarray(gate_weights, dtype=np.float64)
        self.active = np.ascontiguousarray(active, dtype=np.int64)
        for array in (self.hidden, self.gate_weights, self.active):
            array.setflags(write=False)

    @classmethod
    def empty(cls, spec: ModelSpec, batch_size: int, seed: int) -> "Trace":
        return cls(
            spec,
            batch_size,
            seed,
            np.zeros((0, spec.num_layers, spec.hidden_dim)),
            np.zeros((0, spec.num_layers, spec.experts_per_layer)),
            np.zeros((0, spec.num_layers, spec.top_k), dtype=np.int64),
            num_iterations=0,
        )

    @property
    def num_tokens(self) -> int:
        return int(self.hidden.shape[0])

    @property
    def steps(self) -> Iterator[TraceStep]:
        for token in range(self.num_tokens):
            for layer in range(self.spec.num_layers):
                active = tuple(int(e) for e in self.active[token, layer])
                yield TraceStep(
                    token=token,
                    layer=layer,
                    hidden=self.hidden[token, layer],
                    gate_weights=self.gate_weights[token, layer],
                    active_experts=active,
                    tokens_per_expert=dict.fromkeys(active, 1),
                )

    def iteration_tokens(self, iteration: int) -> slice:
        if not 0 <= iteration < self.num_iterations:
            message = f"Iteration {iteration} outside [0, {self.num_iterations})"
            raise IndexError(message)
        return slice(iteration * self.batch_size, (iteration + 1) * self.batch_size)

    def layer_loads(self, iteration: int, layer: int) -> dict[int, int]:
        """Token count per activated expert of one layer in one decode iteration."""
        experts = self.active[self.iteration_tokens(iteration), layer].ravel()
        counts = np.bincount(experts, minlength=self.spec.experts_per_layer)
        return {int(e): int(counts[e]) for e in np.flatnonzero(counts)}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.batch_size == other.batch_size
            and self.seed == other.seed
            and self.num_iterations == other.num_iterations
            and np.array_equal(self.hidden, other.hidden)
            and np.array_equal(self.gate_weights, other.gate_weights)
            and np.array_equal(self.active, other.active)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return (
            f"Trace(layers={self.spec.num_layers}, experts={self.spec.experts_per_layer}, "
            f"tokens={self.num_tokens}, batch={self.batch_size}, seed={self.seed})"
        )


################################################################################


@dataclass(frozen=True)
class _SyntheticModel:
    subspace: FloatArray
    gating: list[FloatArray]
    rank_of: list[IntArray]
    follow_map: list[IntArray]

    @property
    def rank(self) -> int:
        return int(self.subspace.shape[1])

    def sample_directions(self, rng: np.random.Generator, count: int) -> FloatArray:
        """Draw Gaussian hidden directions concentrated on the routing subspace."""
        hidden_dim = self.subspace.shape[0]
        spread = math.sqrt(OFF_SUBSPACE_SHARE * self.rank / hidden_dim)
        inside = rng.standard_normal((count, self.rank)) @ self.subspace.T
        return inside + spread * rng.standard_normal((count, hidden_dim))


def _build_synthetic_model(spec: ModelSpec, model_seed: int) -> _SyntheticModel:
    rng = np.random.default_rng(model_seed)
    rank = min(ROUTING_RANK, spec.hidden_dim)
    subspace, _ = np.linalg.qr(rng.standard_normal((spec.hidden_dim, rank)))
    gating, rank_of, follow_map = [], [], []
    for _ in range(spec.num_layers):
        raw = rng.standard_normal((rank, spec.experts_per_layer))
        if spec.experts_per_layer <= rank:
            rows, _ = np.linalg.qr(raw)
        else:
            rows = raw / np.linalg.norm(raw, axis=0)
        # Unit gating rows inside the routing subspace
        gating.append((subspace @ rows).T)
        rank_of.append(rng.permutation(spec.experts_per_layer))
        follow_map.append(rng.permutation(spec.experts_per_layer))
    return _SyntheticModel(subspace, gating, rank_of, follow_map)


def _knobs(config: TraceGenConfig, group: LayerGroup) -> GroupKnobs:
    knobs: GroupKnobs = getattr(config, group.value)
    return knobs


def _normalize_rows(matrix: FloatArray) -> FloatArray:
    return matrix / np.linalg.norm(matrix, axis=1, keepdims=True)


def generate_trace(
    config: TraceGenConfig | DictConfig,
    spec: ModelSpec,
    batch_size: int,
    seed: int,
) -> Trace:
    """
    Sample a routing trace from a synthetic MoE model.

    The gating matrices, hot-expert ranks and expert-to-expert follow maps depend
    only on `config.model_seed`, so traces drawn with different `seed` values share a model.
    Hidden states concentrate on the low-rank subspace the gating rows span, as the
    gating inputs of trained routers do.
    """
    config = trace_config_from(config)
    check_trace_config(config)
    if batch_size < 1:
        message = f"batch_size must be >= 1, got {batch_size}"
        raise ValueError(message)
    if spec.hidden_dim < 4:
        message = f"hidden_dim must be >= 4, got {spec.hidden_dim}"
        raise ValueError(message)

    model = _build_synthetic_model(spec, config.model_seed)
    rng = np.random.default_rng(seed)

    num_tokens = batch_size * config.num_iterations
    num_layers, num_experts, top_k = spec.num_layers, spec.experts_per_layer, spec.top_k
    hidden = np.empty((num_tokens, num_layers, spec.hidden_dim))
    gate_weights = np.empty((num_tokens, num_layers, num_experts))
    active = np.empty((num_tokens, num_layers, top_k), dtype=np.int64)

    a = _normalize_rows(model.sample_directions(rng, num_tokens))
    previous_top1 = np.zeros(num_tokens, dtype=np.int64)
    rows = np.arange(num_tokens)
    for layer in range(num_layers):
        knobs = _knobs(config, spec.group_of(layer))
        if layer > 0:
            noise = model.sample_directions(rng, num_tokens)
            if knobs.similarity < 1.0:
                # Orthogonal unit component keeps cos(a_l, a_{l+1}) exactly at the target
                noise -= np.sum(noise * a, axis=1, keepdims=True) * a
                noise = _normalize_rows(noise)
                rho = knobs.similarity
                a = _normalize_rows(rho * a + math.sqrt(1.0 - rho * rho) * noise)

        logits = GATE_LOGIT_SCALE * math.sqrt(model.rank) * (a @ model.gating[layer].T)
        logits += -knobs.skew * np.log1p(model.rank_of[layer])
        logits += config.noise * rng.standard_normal((num_tokens, num_experts))

        if layer > 0:
            follow = rng.random(num_tokens) < knobs.correlation
            targets = model.follow_map[layer][previous_top1]
            logits[rows[follow], targets[follow]] = logits[follow].max(axis=1) + FOLLOW_MARGIN

        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        weights = shifted / shifted.sum(axis=1, keepdims=True)
        order = np.argsort(-weights, axis=1, kind="stable")[:, :top_k]

        hidden[:, layer] = a
        gate_weights[:, layer] = weights
        active[:, layer] = order
        previous_top1 = order[:, 0]

    logger.debug(f"Generated {num_tokens} tokens over {num_layers} layers (seed={seed})")
    return Trace(spec, batch_size, seed, hidden, gate_weights, active, num_iterations=config.num_iterations)


################################################################################


@dataclass(frozen=True)
class GroupStats:
    similarity: float | None
    routing_correlation: float | None
    hot_share: float | None


def measure_group_stats(trace: Trace) -> dict[LayerGroup, GroupStats]:
    if trace.num_tokens == 0:
        message = "Cannot measure statistics of an empty trace"
        raise ValueError(message)

    spec = trace.spec
    stats = {}
    for group in LayerGroup:
        layers = spec.layers_in(group)
        paired = [layer for layer in layers if layer > 0]

        similarity = correlation = hot_share = None
        if paired:
            cosines = [np.sum(trace.hidden[:, layer - 1] * trace.hidden[:, layer], axis=1) for layer in paired]
            similarity = float(np.mean(np.concatenate(cosines)))

            # Top-1 transitions per (layer, previous top-1); the modal successor is the routing map guess
            successors: dict[tuple[int, int], Counter[int]] = {}
            for layer in paired:
                for prev, cur in zip(trace.active[:, layer - 1, 0], trace.active[:, layer, 0], strict=True):
                    successors.setdefault((layer, int(prev)), Counter())[int(cur)] += 1
            modal = sum(counter.most_common(1)[0][1] for counter in successors.values())
            correlation = modal / (len(paired) * trace.num_tokens)

        if len(layers):
            shares = []
            for layer in layers:
                counts = np.bincount(trace.active[:, layer].ravel(), minlength=spec.experts_per_layer)
                shares.append(counts.max() / (trace.num_tokens * spec.top_k))
            hot_share = float(np.mean(shares))

        stats[group] = GroupStats(similarity, correlation, hot_share)
    return stats


################################################################################

TRACE_HEADER_SCHEMA = {
    "type": "object",
    "required": ["format_version", "spec", "batch_size", "num_iterations", "seed", "num_steps", "checksum"],
    "properties": {
        "format_version": {"type": "integer"},
        "spec": {
            "type": "object",
            "required": ["num_layers", "experts_per_layer", "top_k", "expert_bytes", "hidden_dim", "group_bounds"],
        },
        "batch_size": {"type": "integer", "minimum": 0},
        "num_iterations": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "num_steps": {"type": "integer", "minimum": 0},
        "checksum": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
    },
}


def _format_floats(values: FloatArray) -> str:
    return "[" + ", ".join(format(float(v), f".{FLOAT_DIGITS}g") for v in values) + "]"


def _format_step(step: TraceStep) -> str:
    tokens_per_expert = json.dumps({str(e): m for e, m in step.tokens_per_expert.items()})
    return (
        f'{{"token": {step.token}, "layer": {step.layer}, '
        f'"hidden": {_format_floats(step.hidden)}, '
        f'"gate_weights": {_format_floats(step.gate_weights)}, '
        f'"active_experts": {json.dumps(list(step.active_experts))}, '
        f'"tokens_per_expert": {tokens_per_expert}}}'
    )


def write_trace(trace: Trace, path: Path) -> None:
    body = "".join(f"{_format_step(step)}\n" for step in trace.steps)
    header = {
        "format_version": TRACE_FORMAT_VERSION,
        "spec": trace.spec.to_dict(),
        "batch_size": trace.batch_size,
        "num_iterations": trace.num_iterations,
        "seed": trace.seed,
        "num_steps": trace.num_tokens * trace.spec.num_layers,
        "checksum": hashlib.sha256(body.encode()).hexdigest(),
    }
    write_text_atomic(path, json.dumps(header) + "\n" + body)
    logger.info(f"Wrote {trace!r} to '{path}'")


def read_trace(path: Path) -> Trace:
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        message = f"Trace '{path}' is not UTF-8 text: {e}"
        raise TraceFormatError(message) from e
    header_line, _, body = text.partition("\n")
    try:
        header = json.loads(header_line)
        jsonschema.validate(header, TRACE_HEADER_SCHEMA)
    except (json.JSONDecodeError, jsonschema.ValidationError) as e:
        message = f"Invalid trace header in '{path}': {e}"
        raise TraceFormatError(message) from e

    if header["format_version"] != TRACE_FORMAT_VERSION:
        message = f"Trace '{path}' has format version {header['format_version']}, expected {TRACE_FORMAT_VERSION}"
        raise TraceFormatError(message)
    if hashlib.sha256(body.encode()).hexdigest() != header["checksum"]:
        message = f"Checksum mismatch in trace '{path}'"
        raise TraceIntegrityError(message)

    try:
        spec = ModelSpec.from_dict(header["spec"])
    except (TypeError, ValueError) as e:
        message = f"Invalid model shape in trace '{path}': {e}"
        raise TraceFormatError(message) from e
    num_layers = spec.num_layers
    lines = body.splitlines()
    if len(lines) != header["num_steps"] or len(lines) % num_layers:
        message = f"Trace '{path}' holds {len(lines)} steps, header declares {header['num_steps']}"
        raise TraceFormatError(message)

    num_tokens = len(lines) // num_layers
    hidden = np.empty((num_tokens, num_layers, spec.hidden_dim))
    gate_weights = np.empty((num_tokens, num_layers, spec.experts_per_layer))
    active = np.empty((num_tokens, num_layers, spec.top_k), dtype=np.int64)
    for index, line in enumerate(lines):
        token, layer = divmod(index, num_layers)
        try:
            record = json.loads(line)
            position = (record["token"], record["layer"])
            values = (record["hidden"], record["gate_weights"], record["active_experts"])
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            message = f"Malformed step {index} in trace '{path}': {e!r}"
            raise TraceFormatError(message) from e
        if position != (token, layer):
            message = f"Trace '{path}' step {index} is {position}, expected ({token}, {layer})"
            raise TraceFormatError(message)
        try:
            hidden[token, layer], gate_weights[token, layer], active[token, layer] = values
        except (TypeError, ValueError) as e:
            message = f"Step {index} of trace '{path}' does not fit the model shape: {e}"
            raise TraceFormatError(message) from e

    try:
        return Trace(
            spec,
            header["batch_size"],
            header["seed"],
            hidden,
            gate_weights,
            active,
            num_iterations=header["num_iterations"],
        )
    except ValueError as e:
        message = f"Inconsistent trace '{path}': {e}"
        raise TraceFormatError(message) from e
