import hashlib
import io
import json
import logging
import math
import zipfile
from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
from omegaconf import DictConfig, OmegaConf

from prescope.config import GroupTrainConfig, TrainConfig
from prescope.constants import CHECKPOINT_FORMAT_VERSION, PROBABILITY_CLAMP
from prescope.errors import CheckpointError, ShapeMismatchError
from prescope.workload import LayerGroup, ModelSpec, Trace

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

GELU_SCALE = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715

NUM_BLOCKS = {LayerGroup.INPUT: 2, LayerGroup.MIDDLE: 3, LayerGroup.OUTPUT: 2}
NUM_RESIDUAL_LAYERS = 2
VALIDATION_SHARE = 0.1


def train_config_from(config: TrainConfig | DictConfig) -> TrainConfig:
    if isinstance(config, DictConfig):
        converted = OmegaConf.to_object(config)
        assert isinstance(converted, TrainConfig)
        return converted
    return config


def group_settings(config: TrainConfig, group: LayerGroup) -> GroupTrainConfig:
    settings: GroupTrainConfig = getattr(config, group.value)
    return settings


################################################################################


@dataclass(frozen=True)
class PCABasis:
    mean: FloatArray
    components: FloatArray
    explained_variance: FloatArray
    requested_dim: int

    @property
    def out_dim(self) -> int:
        return int(self.components.shape[1])


def pca_fit(samples: FloatArray, out_dim: int) -> PCABasis:
    samples = np.asarray(samples, dtype=np.float64)
    num_samples, hidden_dim = samples.shape
    if out_dim > hidden_dim:
        message = f"PCA output dimension {out_dim} exceeds input dimension {hidden_dim}"
        raise ValueError(message)
    if num_samples < out_dim:
        message = f"PCA to {out_dim} dimensions needs at least {out_dim} samples, got {num_samples}"
        raise ValueError(message)

    mean = samples.mean(axis=0)
    centered = samples - mean
    covariance = centered.T @ centered / max(num_samples - 1, 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(-eigenvalues, kind="stable")
    eigenvalues, eigenvectors = eigenvalues[order], eigenvectors[:, order]

    rank = int(np.linalg.matrix_rank(centered))
    effective = min(out_dim, rank)
    if effective < out_dim:
        logger.warning(f"PCA input has rank {rank}, reducing {out_dim} components to {effective}")

    components = eigenvectors[:, :effective]
    # Make the largest-magnitude entry of every component positive
    pivots = components[np.argmax(np.abs(components), axis=0), np.arange(effective)]
    components = components * np.where(pivots < 0, -1.0, 1.0)
    return PCABasis(mean, components, np.maximum(eigenvalues[:effective], 0.0), out_dim)


def pca_apply(basis: PCABasis, vectors: FloatArray) -> FloatArray:
    return (np.asarray(vectors, dtype=np.float64) - basis.mean) @ basis.components


################################################################################


def one_hot(active: IntArray, num_experts: int) -> FloatArray:
    encoded = np.zeros((active.shape[0], num_experts))
    np.put_along_axis(encoded, active, 1.0, axis=1)
    return encoded


@dataclass(frozen=True)
class PredictorFeatures:
    hidden_reduced: FloatArray
    active_onehot: FloatArray
    gate_weights_prev: FloatArray

    def __post_init__(self) -> None:
        rows = {self.hidden_reduced.shape[0], self.active_onehot.shape[0], self.gate_weights_prev.shape[0]}
        if len(rows) != 1:
            message = "Feature parts disagree on the number of samples"
            raise ShapeMismatchError(message)
        if self.active_onehot.shape != self.gate_weights_prev.shape:
            message = f"One-hot shape {self.active_onehot.shape} differs from gate weights {self.gate_weights_prev.shape}"
            raise ShapeMismatchError(message)

    @classmethod
    def from_trace(cls, trace: Trace, rows: slice | IntArray, layer: int, basis: PCABasis) -> "PredictorFeatures":
        return cls(
            hidden_reduced=pca_apply(basis, trace.hidden[rows, layer]),
            active_onehot=one_hot(trace.active[rows, layer], trace.spec.experts_per_layer),
            gate_weights_prev=np.array(trace.gate_weights[rows, layer]),
        )

    @property
    def num_samples(self) -> int:
        return int(self.hidden_reduced.shape[0])

    def matrix(self) -> FloatArray:
        return np.hstack([self.hidden_reduced, self.active_onehot, self.gate_weights_prev])


################################################################################


def sigmoid(z: FloatArray) -> FloatArray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def gelu(z: FloatArray) -> FloatArray:
    return 0.5 * z * (1.0 + np.tanh(GELU_SCALE * (z + GELU_CUBIC * z**3)))


def gelu_grad(z: FloatArray) -> FloatArray:
    t = np.tanh(GELU_SCALE * (z + GELU_CUBIC * z**3))
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * z * z)


def dropout_mask(shape: tuple[int, ...], rate: float, rng: np.random.Generator) -> FloatArray:
    if rate >= 1.0:
        return np.zeros(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


@dataclass
class LLaPorNet:
    """
    Next-layer activation predictor for one target layer.

    Middle-group nets stack one more block and add a residual block whose output is
    scaled by a sigmoid gate computed from the reduced hidden state.
    """

    layer: int
    group: LayerGroup
    pca: PCABasis
    params: dict[str, FloatArray]
    num_blocks: int
    num_residual: int
    dropout: float

    @property
    def num_experts(self) -> int:
        return int(self.params["head.bias"].shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.params["block0.weight"].shape[0])

    def copy(self) -> "LLaPorNet":
        return LLaPorNet(
            self.layer,
            self.group,
            self.pca,
            {name: value.copy() for name, value in self.params.items()},
            self.num_blocks,
            self.num_residual,
            self.dropout,
        )


def init_net(
    layer: int,
    group: LayerGroup,
    pca: PCABasis,
    num_experts: int,
    width: int,
    dropout: float,
    rng: np.random.Generator,
) -> LLaPorNet:
    input_dim = pca.out_dim + 2 * num_experts
    params: dict[str, FloatArray] = {}
    fan_in = input_dim
    for index in range(NUM_BLOCKS[group]):
        params[f"block{index}.weight"] = rng.standard_normal((fan_in, width)) * math.sqrt(2.0 / fan_in)
        params[f"block{index}.bias"] = np.zeros(width)
        fan_in = width

    num_residual = NUM_RESIDUAL_LAYERS if group == LayerGroup.MIDDLE else 0
    for index in range(num_residual):
        params[f"residual{index}.weight"] = rng.standard_normal((width, width)) * math.sqrt(2.0 / width)
        params[f"residual{index}.bias"] = np.zeros(width)
    if num_residual:
        params["gate.weight"] = np.zeros(pca.out_dim)
        params["gate.bias"] = np.zeros(1)

    params["head.weight"] = rng.standard_normal((width, num_experts)) * math.sqrt(1.0 / width)
    params["head.bias"] = np.zeros(num_experts)
    return LLaPorNet(layer, group, pca, params, NUM_BLOCKS[group], num_residual, dropout)


@dataclass
class _ForwardCache:
    blocks: list[tuple[FloatArray, FloatArray, FloatArray]] = field(default_factory=list)
    residual: list[tuple[FloatArray, FloatArray, FloatArray]] = field(default_factory=list)
    residual_input: FloatArray | None = None
    residual_output: FloatArray | None = None
    gate: FloatArray | None = None
    hidden_reduced: FloatArray | None = None
    head_input: FloatArray | None = None


def _run_layers(
    net: LLaPorNet,
    prefix: str,
    count: int,
    x: FloatArray,
    train_mode: bool,
    rng: np.random.Generator | None,
    cache: list[tuple[FloatArray, FloatArray, FloatArray]],
) -> FloatArray:
    for index in range(count):
        z = x @ net.params[f"{prefix}{index}.weight"] + net.params[f"{prefix}{index}.bias"]
        if train_mode:
            assert rng is not None
            mask = dropout_mask(z.shape, net.dropout, rng)
        else:
            mask = np.ones_like(z)
        cache.append((x, z, mask))
        x = gelu(z) * mask
    return x


def _forward(
    net: LLaPorNet,
    feat: PredictorFeatures,
    train_mode: bool,
    rng: np.random.Generator | None,
) -> tuple[FloatArray, _ForwardCache]:
    x = feat.matrix()
    if x.shape[1] != net.input_dim or feat.hidden_reduced.shape[1] != net.pca.out_dim:
        message = f"Features of width {x.shape[1]} do not match a net expecting {net.input_dim}"
        raise ShapeMismatchError(message)

    cache = _ForwardCache(hidden_reduced=feat.hidden_reduced)
    x = _run_layers(net, "block", net.num_blocks, x, train_mode, rng, cache.blocks)
    if net.num_residual:
        cache.residual_input = x
        r = _run_layers(net, "residual", net.num_residual, x, train_mode, rng, cache.residual)
        gate = sigmoid(feat.hidden_reduced @ net.params["gate.weight"] + net.params["gate.bias"])[:, None]
        cache.residual_output, cache.gate = r, gate
        x = r * gate + x
    cache.head_input = x
    return x @ net.params["head.weight"] + net.params["head.bias"], cache


def forward(
    net: LLaPorNet,
    feat: PredictorFeatures,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[FloatArray, FloatArray]:
    if train_mode and rng is None:
        message = "Training-mode forward passes need a random generator for dropout"
        raise ValueError(message)
    logits, _ = _forward(net, feat, train_mode, rng)
    return logits, sigmoid(logits)


def _backward_layers(
    net: LLaPorNet,
    prefix: str,
    cache: list[tuple[FloatArray, FloatArray, FloatArray]],
    upstream: FloatArray,
    grads: dict[str, FloatArray],
) -> FloatArray:
    for index in reversed(range(len(cache))):
        x, z, mask = cache[index]
        dz = upstream * mask * gelu_grad(z)
        grads[f"{prefix}{index}.weight"] = x.T @ dz
        grads[f"{prefix}{index}.bias"] = dz.sum(axis=0)
        upstream = dz @ net.params[f"{prefix}{index}.weight"].T
    return upstream


def _backward(net: LLaPorNet, cache: _ForwardCache, dlogits: FloatArray) -> dict[str, FloatArray]:
    assert cache.head_input is not None
    grads = {
        "head.weight": cache.head_input.T @ dlogits,
        "head.bias": dlogits.sum(axis=0),
    }
    upstream = dlogits @ net.params["head.weight"].T

    if net.num_residual:
        assert cache.gate is not None and cache.residual_output is not None and cache.hidden_reduced is not None
        dgate = np.sum(upstream * cache.residual_output, axis=1) * (cache.gate[:, 0] * (1.0 - cache.gate[:, 0]))
        grads["gate.weight"] = cache.hidden_reduced.T @ dgate
        grads["gate.bias"] = np.array([dgate.sum()])
        skip = upstream
        upstream = skip + _backward_layers(net, "residual", cache.residual, upstream * cache.gate, grads)

    _backward_layers(net, "block", cache.blocks, upstream, grads)
    return grads


################################################################################


def hybrid_loss(
    logits: FloatArray,
    labels: FloatArray,
    frequencies: FloatArray,
    focal_weight: float = 1.0,
    gamma: float = 2.0,
) -> tuple[float, FloatArray]:
    """
    Frequency-weighted BCE plus a focal term, both averaged over samples and experts.

    Returns the loss and its gradient with respect to the logits.
    """
    frequencies = np.asarray(frequencies, dtype=np.float64)
    if np.any(frequencies <= 0):
        message = "Expert frequencies must be positive"
        raise ValueError(message)

    p = np.clip(sigmoid(logits), PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    p_t = labels * p + (1.0 - labels) * (1.0 - p)
    bce = -np.log(p_t)
    modulating = (1.0 - p_t) ** gamma

    loss = float(np.mean(bce / frequencies) + focal_weight * np.mean(modulating * bce))

    sign = 2.0 * labels - 1.0
    d_expert = (p - labels) / frequencies
    d_focal = sign * (gamma * p_t * modulating * np.log(p_t) - (1.0 - p_t) * modulating)
    gradient = (d_expert + focal_weight * d_focal) / logits.size
    return loss, gradient


def bce_loss(logits: FloatArray, labels: FloatArray) -> tuple[float, FloatArray]:
    return hybrid_loss(logits, labels, np.ones(logits.shape[1]), focal_weight=0.0, gamma=0.0)


def lr_at_epoch(epoch: int, base_lr: float, warmup_epochs: int, epochs: int) -> float:
    if epoch < warmup_epochs:
        return base_lr * (epoch + 1) / warmup_epochs
    progress = (epoch - warmup_epochs) / max(1, epochs - warmup_epochs)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(
        self,
        params: dict[str, FloatArray],
        weight_decay: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.first = {name: np.zeros_like(value) for name, value in params.items()}
        self.second = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, grads: dict[str, FloatArray], lr: float) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count
        for name, param in self.params.items():
            grad = grads[name]
            self.first[name] = self.beta1 * self.first[name] + (1.0 - self.beta1) * grad
            self.second[name] = self.beta2 * self.second[name] + (1.0 - self.beta2) * grad * grad
            update = (self.first[name] / correction1) / (np.sqrt(self.second[name] / correction2) + self.eps)
            param -= lr * self.weight_decay * param
            param -= lr * update


################################################################################


@dataclass(frozen=True)
class HotExpertTable:
    """Activation counts per (layer, expert) over the observed tokens."""

    counts: IntArray

    @classmethod
    def from_traces(cls, traces: Sequence[Trace]) -> "HotExpertTable":
        spec = traces[0].spec
        counts = np.zeros((spec.num_layers, spec.experts_per_layer), dtype=np.int64)
        for trace in traces:
            for layer in range(spec.num_layers):
                counts[layer] += np.bincount(trace.active[:, layer].ravel(), minlength=spec.experts_per_layer)
        return cls(counts)

    @property
    def ranking(self) -> list[tuple[int, int]]:
        num_layers, num_experts = self.counts.shape
        pairs = [(layer, expert) for layer in range(num_layers) for expert in range(num_experts)]
        return sorted(pairs, key=lambda pair: (-int(self.counts[pair]), pair[0], pair[1]))

    def frequencies(self, layer: int) -> FloatArray:
        total = self.counts[layer].sum()
        return self.counts[layer] / total if total else np.zeros(self.counts.shape[1])

    def smoothed_frequencies(self, layer: int) -> FloatArray:
        """Laplace-smoothed frequencies scaled to a mean of one."""
        counts = self.counts[layer] + 1.0
        return counts * len(counts) / counts.sum()

    def top_experts(self, layer: int, k: int) -> list[int]:
        order = np.argsort(-self.counts[layer], kind="stable")
        return [int(expert) for expert in order[:k]]


def plan_residency(table: HotExpertTable, budget_bytes: int, expert_bytes: int) -> frozenset[tuple[int, int]]:
    if budget_bytes < 0:
        message = f"Residency budget must be >= 0, got {budget_bytes}"
        raise ValueError(message)
    limit = budget_bytes // expert_bytes
    return frozenset(table.ranking[:limit])


################################################################################


def predict_topk(net: LLaPorNet, feat: PredictorFeatures, k: int) -> IntArray:
    logits, _ = forward(net, feat)
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


def stats_predict(table: HotExpertTable, layer: int, k: int) -> list[int]:
    return table.top_experts(layer, k)


def gate_reuse_predict(previous_gate_weights: FloatArray, k: int) -> IntArray:
    weights = np.atleast_2d(previous_gate_weights)
    return np.argsort(-weights, axis=1, kind="stable")[:, :k]


def oracle_noise_predict(
    true_experts: Sequence[int],
    hit_rate: float,
    rng: np.random.Generator,
    k: int,
    num_experts: int,
) -> list[int]:
    """Keep each true expert with probability `hit_rate`, otherwise swap in a wrong one."""
    truth = [int(expert) for expert in true_experts[:k]]
    keep = rng.random(len(truth)) < hit_rate
    wrong = [expert for expert in rng.permutation(num_experts) if expert not in truth]
    predicted = []
    for expert, kept in zip(truth, keep, strict=True):
        predicted.append(expert if kept or not wrong else int(wrong.pop(0)))
    return predicted


class AccuracyMode(Enum):
    EXACT = "exact"
    SLIDING = "sliding"


def eval_accuracy(predicted: Sequence[int], true: Sequence[int], mode: AccuracyMode) -> bool:
    """
    `exact` compares the predicted top-k with the true top-k as sets; `sliding` accepts the
    prediction when it falls within the (longer) true top-k'.
    """
    if mode == AccuracyMode.EXACT:
        return set(predicted) == set(list(true)[: len(predicted)])
    if len(predicted) > len(true):
        message = f"Sliding accuracy needs k <= k', got {len(predicted)} > {len(true)}"
        raise ValueError(message)
    return set(predicted) <= set(true)


def accuracy_hits(predicted: IntArray, true: IntArray, mode: AccuracyMode) -> int:
    return sum(eval_accuracy(list(p), list(t), mode) for p, t in zip(predicted, true, strict=True))


def accuracy_rate(predicted: IntArray, true: IntArray, mode: AccuracyMode) -> float:
    if len(predicted) == 0:
        return 0.0
    return accuracy_hits(predicted, true, mode) / len(predicted)


def true_topk(trace: Trace, rows: slice, layer: int, k: int) -> IntArray:
    return np.argsort(-trace.gate_weights[rows, layer], axis=1, kind="stable")[:, :k]


def precision(predicted: IntArray, true: IntArray) -> float:
    if predicted.size == 0:
        return 0.0
    return float(np.mean([np.isin(p, t).mean() for p, t in zip(predicted, true, strict=True)]))


################################################################################


class RoutingPredictor(ABC):
    """Predicts which experts the tokens of one decode iteration activate at a layer."""

    def __init__(self, spec: ModelSpec, table: HotExpertTable, validation_hit_rate: float) -> None:
        self.spec = spec
        self.table = table
        self.validation_hit_rate = validation_hit_rate

    @abstractmethod
    def predict_tokens(
        self,
        trace: Trace,
        iteration: int,
        layer: int,
        depth: int,
        seed: int,
        k: int | None = None,
    ) -> IntArray:
        """Predicted top-k experts per token of `iteration` at `layer`, made `depth` layers ahead."""

    def stats_tokens(self, trace: Trace, layer: int, k: int) -> IntArray:
        return np.tile(np.array(stats_predict(self.table, layer, k), dtype=np.int64), (trace.batch_size, 1))

    def predict_counts(self, trace: Trace, iteration: int, layer: int, depth: int, seed: int) -> dict[int, int]:
        predicted = self.predict_tokens(trace, iteration, layer, depth, seed)
        counts = np.bincount(predicted.ravel(), minlength=self.spec.experts_per_layer)
        return {int(e): int(counts[e]) for e in np.flatnonzero(counts)}


class StatsPredictor(RoutingPredictor):
    def predict_tokens(
        self,
        trace: Trace,
        iteration: int,
        layer: int,
        depth: int,
        seed: int,
        k: int | None = None,
    ) -> IntArray:
        return self.stats_tokens(trace, layer, k or self.spec.top_k)


class GateReusePredictor(RoutingPredictor):
    def predict_tokens(
        self,
        trace: Trace,
        iteration: int,
        layer: int,
        depth: int,
        seed: int,
        k: int | None = None,
    ) -> IntArray:
        k = k or self.spec.top_k
        if layer - depth < 0:
            return self.stats_tokens(trace, layer, k)
        return gate_reuse_predict(trace.gate_weights[trace.iteration_tokens(iteration), layer - depth], k)


class OracleNoisePredictor(RoutingPredictor):
    def __init__(self, spec: ModelSpec, table: HotExpertTable, hit_rate: float) -> None:
        super().__init__(spec, table, hit_rate)
        self.hit_rate = hit_rate

    def predict_tokens(
        self,
        trace: Trace,
        iteration: int,
        layer: int,
        depth: int,
        seed: int,
        k: int | None = None,
    ) -> IntArray:
        k = k or self.spec.top_k
        rng = np.random.default_rng([seed, iteration, layer, depth])
        truth = true_topk(trace, trace.iteration_tokens(iteration), layer, k)
        return np.array(
            [oracle_noise_predict(row, self.hit_rate, rng, k, self.spec.experts_per_layer) for row in truth],
            dtype=np.int64,
        ).reshape(truth.shape)


class LLaPorPredictor(RoutingPredictor):
    """Trained nets for depth-1 predictions; the hot-expert table covers layer 0 and depth 2."""

    def __init__(self, model: "LLaPorModel") -> None:
        super().__init__(model.spec, model.table, model.validation_hit_rate)
        self.model = model

    def predict_tokens(
        self,
        trace: Trace,
        iteration: int,
        layer: int,
        depth: int,
        seed: int,
        k: int | None = None,
    ) -> IntArray:
        k = k or self.spec.top_k
        net = self.model.nets.get(layer)
        if depth != 1 or net is None:
            return self.stats_tokens(trace, layer, k)
        feat = PredictorFeatures.from_trace(trace, trace.iteration_tokens(iteration), layer - 1, net.pca)
        return predict_topk(net, feat, k)


def layer_accuracy(
    predictor: RoutingPredictor,
    trace: Trace,
    k: int,
    kprime: int,
    mode: AccuracyMode,
    seed: int = 0,
) -> list[float]:
    num_experts = trace.spec.experts_per_layer
    k, kprime = min(k, num_experts), min(kprime, num_experts)
    rates = []
    for layer in range(trace.spec.num_layers):
        hits = total = 0
        for iteration in range(trace.num_iterations):
            rows = trace.iteration_tokens(iteration)
            predicted = predictor.predict_tokens(trace, iteration, layer, 1, seed, k)
            true = true_topk(trace, rows, layer, kprime if mode == AccuracyMode.SLIDING else k)
            hits += accuracy_hits(predicted, true, mode)
            total += len(predicted)
        rates.append(hits / total if total else 0.0)
    return rates


################################################################################


@dataclass(frozen=True)
class LLaPorModel:
    spec: ModelSpec
    nets: dict[int, LLaPorNet]
    table: HotExpertTable
    validation_hit_rate: float
    train_config: TrainConfig
    trace_checksum: str


@dataclass(frozen=True)
class TrainResult:
    model: LLaPorModel
    loss_curves: dict[int, list[float]]


def trace_checksum(traces: Sequence[Trace]) -> str:
    digest = hashlib.sha256()
    for trace in traces:
        for array in (trace.hidden, trace.gate_weights, trace.active):
            digest.update(array.tobytes())
    return digest.hexdigest()


def _layer_samples(traces: Sequence[Trace], layer: int) -> tuple[FloatArray, IntArray, FloatArray, IntArray]:
    hidden = np.concatenate([trace.hidden[:, layer - 1] for trace in traces])
    active_prev = np.concatenate([trace.active[:, layer - 1] for trace in traces])
    gates_prev = np.concatenate([trace.gate_weights[:, layer - 1] for trace in traces])
    active = np.concatenate([trace.active[:, layer] for trace in traces])
    return hidden, active_prev, gates_prev, active


def _augment(
    feat: PredictorFeatures,
    noise_std: float,
    mask_rate: float,
    rng: np.random.Generator,
) -> PredictorFeatures:
    hidden = feat.hidden_reduced + noise_std * rng.standard_normal(feat.hidden_reduced.shape)
    keep = rng.random(hidden.shape) >= mask_rate
    return PredictorFeatures(hidden * keep, feat.active_onehot, feat.gate_weights_prev)


def train_net(
    net: LLaPorNet,
    feat: PredictorFeatures,
    labels: FloatArray,
    frequencies: FloatArray,
    config: TrainConfig,
    rng: np.random.Generator,
    epochs: int | None = None,
) -> list[float]:
    """Train `net` in place and return the mean loss of every epoch."""
    settings = group_settings(config, net.group)
    epochs = config.epochs if epochs is None else epochs
    optimizer = AdamW(net.params, settings.weight_decay)
    use_hybrid = net.group != LayerGroup.MIDDLE

    curve = []
    for epoch in range(epochs):
        lr = lr_at_epoch(epoch, settings.lr, config.warmup_epochs, epochs)
        order = rng.permutation(feat.num_samples)
        total = 0.0
        for begin in range(0, feat.num_samples, config.batch_size):
            batch = order[begin : begin + config.batch_size]
            batch_feat = _augment(
                PredictorFeatures(feat.hidden_reduced[batch], feat.active_onehot[batch], feat.gate_weights_prev[batch]),
                config.noise_std,
                config.mask_rate,
                rng,
            )
            logits, cache = _forward(net, batch_feat, True, rng)
            if use_hybrid:
                loss, dlogits = hybrid_loss(logits, labels[batch], frequencies, config.focal_weight, config.gamma)
            else:
                loss, dlogits = bce_loss(logits, labels[batch])
            optimizer.step(_backward(net, cache, dlogits), lr)
            total += loss * len(batch)
        curve.append(total / feat.num_samples)
    return curve


def train(traces: Sequence[Trace], config: TrainConfig | DictConfig) -> TrainResult:
    config = train_config_from(config)
    if not traces or all(trace.num_tokens == 0 for trace in traces):
        message = "Training needs at least one non-empty trace"
        raise ValueError(message)
    spec = traces[0].spec
    if any(trace.spec != spec for trace in traces):
        message = "All training traces must share one model shape"
        raise ShapeMismatchError(message)

    table = HotExpertTable.from_traces(traces)
    nets: dict[int, LLaPorNet] = {}
    curves: dict[int, list[float]] = {}
    hits = []
    for layer in range(1, spec.num_layers):
        group = spec.group_of(layer)
        rng = np.random.default_rng([config.seed, layer])
        hidden, active_prev, gates_prev, active = _layer_samples(traces, layer)

        num_samples = len(hidden)
        holdout = math.ceil(num_samples * VALIDATION_SHARE) if num_samples >= 20 else 0
        fit = slice(0, num_samples - holdout)

        pca_dim = min(group_settings(config, group).pca_dim, spec.hidden_dim, fit.stop)
        basis = pca_fit(hidden[fit], pca_dim)
        net = init_net(layer, group, basis, spec.experts_per_layer, config.hidden_width, config.dropout, rng)
        feat = PredictorFeatures(pca_apply(basis, hidden), one_hot(active_prev, spec.experts_per_layer), gates_prev)
        labels = one_hot(active, spec.experts_per_layer)

        train_feat = PredictorFeatures(feat.hidden_reduced[fit], feat.active_onehot[fit], feat.gate_weights_prev[fit])
        curves[layer] = train_net(net, train_feat, labels[fit], table.smoothed_frequencies(layer), config, rng)
        nets[layer] = net

        check = slice(num_samples - holdout, num_samples) if holdout else fit
        check_feat = PredictorFeatures(feat.hidden_reduced[check], feat.active_onehot[check], feat.gate_weights_prev[check])
        hits.append(precision(predict_topk(net, check_feat, spec.top_k), active[check]))
        logger.info(f"Layer {layer} ({group.value}): loss {curves[layer][0]:.4f} -> {curves[layer][-1]:.4f}")

    model = LLaPorModel(
        spec=spec,
        nets=nets,
        table=table,
        validation_hit_rate=float(np.mean(hits)) if hits else 1.0,
        train_config=config,
        trace_checksum=trace_checksum(traces),
    )
    return TrainResult(model, curves)


def fine_tune(model: LLaPorModel, trace: Trace, steps: int) -> LLaPorModel:
    """Run `steps` epochs on new samples at each group's base learning rate; the input model is untouched."""
    if trace.spec != model.spec:
        message = "Fine-tuning trace has a different model shape"
        raise ShapeMismatchError(message)
    config = model.train_config
    nets = {}
    for layer, original in model.nets.items():
        net = original.copy()
        rng = np.random.default_rng([config.seed, layer, steps])
        hidden, active_prev, gates_prev, active = _layer_samples([trace], layer)
        feat = PredictorFeatures(
            pca_apply(net.pca, hidden),
            one_hot(active_prev, model.spec.experts_per_layer),
            gates_prev,
        )
        flat = replace(config, warmup_epochs=0)
        train_net(
            net,
            feat,
            one_hot(active, model.spec.experts_per_layer),
            model.table.smoothed_frequencies(layer),
            flat,
            rng,
            epochs=steps,
        )
        nets[layer] = net
    return LLaPorModel(model.spec, nets, model.table, model.validation_hit_rate, config, model.trace_checksum)


################################################################################


def save_checkpoint(model: LLaPorModel, path: Path) -> None:
    arrays: dict[str, FloatArray | IntArray] = {"table.counts": model.table.counts}
    nets_meta = {}
    for layer, net in model.nets.items():
        arrays[f"layer{layer}/pca.mean"] = net.pca.mean
        arrays[f"layer{layer}/pca.components"] = net.pca.components
        arrays[f"layer{layer}/pca.explained"] = net.pca.explained_variance
        for name, value in net.params.items():
            arrays[f"layer{layer}/{name}"] = value
        nets_meta[str(layer)] = {
            "group": net.group.value,
            "num_blocks": net.num_blocks,
            "num_residual": net.num_residual,
            "dropout": net.dropout,
            "requested_dim": net.pca.requested_dim,
            "params": sorted(net.params),
        }

    metadata = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "train_config": asdict(model.train_config),
        "trace_checksum": model.trace_checksum,
        "validation_hit_rate": model.validation_hit_rate,
        "nets": nets_meta,
    }
    buffer = io.BytesIO()
    np.savez(buffer, metadata=np.array(json.dumps(metadata, sort_keys=True)), **arrays)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buffer.getvalue())
    logger.info(f"Wrote predictor checkpoint to '{path}'")


def _read_checkpoint(path: Path) -> LLaPorModel:
    with np.load(path, allow_pickle=False) as archive:
        metadata: dict[str, Any] = json.loads(str(archive["metadata"]))
        if metadata["format_version"] != CHECKPOINT_FORMAT_VERSION:
            message = f"Checkpoint '{path}' has format version {metadata['format_version']}"
            raise CheckpointError(message)

        nets = {}
        for key, meta in metadata["nets"].items():
            layer = int(key)
            pca = PCABasis(
                archive[f"layer{layer}/pca.mean"],
                archive[f"layer{layer}/pca.components"],
                archive[f"layer{layer}/pca.explained"],
                meta["requested_dim"],
            )
            params = {name: np.array(archive[f"layer{layer}/{name}"]) for name in meta["params"]}
            nets[layer] = LLaPorNet(
                layer,
                LayerGroup(meta["group"]),
                pca,
                params,
                meta["num_blocks"],
                meta["num_residual"],
                meta["dropout"],
            )
        table = HotExpertTable(np.array(archive["table.counts"]))

    train_config = OmegaConf.to_object(OmegaConf.merge(OmegaConf.structured(TrainConfig), metadata["train_config"]))
    assert isinstance(train_config, TrainConfig)
    return LLaPorModel(
        ModelSpec.from_dict(metadata["spec"]),
        nets,
        table,
        metadata["validation_hit_rate"],
        train_config,
        metadata["trace_checksum"],
    )


def load_checkpoint(path: Path) -> LLaPorModel:
    try:
        return _read_checkpoint(path)
    except CheckpointError:
        raise
    except (KeyError, ValueError, OSError, zipfile.BadZipFile) as e:
        message = f"Invalid predictor checkpoint '{path}': {e}"
        raise CheckpointError(message) from e
