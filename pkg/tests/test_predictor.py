import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from prescope.config import GroupKnobs, GroupTrainConfig, ModelConfig, TraceGenConfig, TrainConfig
from prescope.constants import GIB
from prescope.errors import CheckpointError, ShapeMismatchError
from prescope.predictor import (
    AccuracyMode,
    GateReusePredictor,
    HotExpertTable,
    LLaPorNet,
    LLaPorPredictor,
    OracleNoisePredictor,
    PredictorFeatures,
    StatsPredictor,
    _backward,
    _forward,
    bce_loss,
    dropout_mask,
    eval_accuracy,
    fine_tune,
    forward,
    gate_reuse_predict,
    hybrid_loss,
    init_net,
    layer_accuracy,
    load_checkpoint,
    lr_at_epoch,
    oracle_noise_predict,
    pca_apply,
    pca_fit,
    plan_residency,
    precision,
    predict_topk,
    save_checkpoint,
    stats_predict,
    train,
    train_net,
    true_topk,
)
from prescope.workload import LayerGroup, ModelSpec, Trace, generate_trace, spec_from_config

FAST_TRAIN = TrainConfig(epochs=2, warmup_epochs=1, batch_size=16, hidden_width=8)


def learnable_config(correlation: float) -> TraceGenConfig:
    knobs = GroupKnobs(similarity=0.5, correlation=correlation, skew=0.0)
    return TraceGenConfig(input=knobs, middle=replace(knobs), output=replace(knobs), noise=0.0)


def quick_config(lr: float = 1e-2, epochs: int = 30) -> TrainConfig:
    group = GroupTrainConfig(lr=lr, weight_decay=1e-4, pca_dim=8)
    return TrainConfig(
        epochs=epochs,
        warmup_epochs=min(5, epochs),
        hidden_width=32,
        dropout=0.0,
        noise_std=0.0,
        mask_rate=0.0,
        input=group,
        middle=replace(group),
        output=replace(group),
    )


def random_features(rng: np.random.Generator, samples: int, reduced: int, experts: int) -> PredictorFeatures:
    active = np.argsort(rng.random((samples, experts)), axis=1)[:, :2]
    onehot = np.zeros((samples, experts))
    np.put_along_axis(onehot, active, 1.0, axis=1)
    gates = rng.random((samples, experts))
    return PredictorFeatures(rng.standard_normal((samples, reduced)), onehot, gates / gates.sum(axis=1, keepdims=True))


@pytest.fixture
def middle_net() -> tuple[LLaPorNet, PredictorFeatures]:
    rng = np.random.default_rng(0)
    basis = pca_fit(rng.standard_normal((40, 6)), 3)
    net = init_net(2, LayerGroup.MIDDLE, basis, 5, 7, 0.0, rng)
    net.params["gate.weight"] = rng.standard_normal(3)
    return net, random_features(rng, 8, 3, 5)


# PCA ##############################################################################################


def test_pca_exact_subspace() -> None:
    rng = np.random.default_rng(1)
    plane = rng.standard_normal((2, 5))
    data = rng.standard_normal((50, 2)) @ plane + 3.0
    basis = pca_fit(data, 2)
    reconstructed = pca_apply(basis, data) @ basis.components.T + basis.mean
    np.testing.assert_allclose(reconstructed, data, atol=1e-9)


def test_pca_full_rank_preserves_distances() -> None:
    rng = np.random.default_rng(2)
    data = rng.standard_normal((30, 6))
    projected = pca_apply(pca_fit(data, 6), data)
    original = np.linalg.norm(data[:, None] - data[None], axis=2)
    mapped = np.linalg.norm(projected[:, None] - projected[None], axis=2)
    np.testing.assert_allclose(mapped, original, atol=1e-6)


def test_pca_projected_variance_matches_eigenvalues() -> None:
    rng = np.random.default_rng(3)
    data = rng.standard_normal((200, 8)) * np.arange(1, 9)
    basis = pca_fit(data, 3)
    eigenvalues = np.sort(np.linalg.eigvalsh(np.cov(data, rowvar=False)))[::-1]
    assert pca_apply(basis, data).var(axis=0, ddof=1).sum() == pytest.approx(eigenvalues[:3].sum(), rel=1e-9)


def test_pca_rank_deficient_input(caplog: pytest.LogCaptureFixture) -> None:
    rng = np.random.default_rng(4)
    data = rng.standard_normal((20, 2)) @ rng.standard_normal((2, 5))
    with caplog.at_level(logging.WARNING):
        basis = pca_fit(data, 3)
    assert basis.out_dim == 2
    assert basis.requested_dim == 3
    assert "rank 2" in caplog.text


def test_pca_bounds() -> None:
    with pytest.raises(ValueError, match="exceeds"):
        pca_fit(np.zeros((10, 3)), 4)
    with pytest.raises(ValueError, match="samples"):
        pca_fit(np.zeros((2, 5)), 3)


# Forward pass #####################################################################################


def test_zero_net_predicts_one_half(middle_net: tuple[LLaPorNet, PredictorFeatures]) -> None:
    net, feat = middle_net
    for value in net.params.values():
        value[...] = 0.0
    logits, probs = forward(net, feat)
    np.testing.assert_array_equal(logits, 0.0)
    np.testing.assert_array_equal(probs, 0.5)


def test_dropout_rate_one_zeroes_activations() -> None:
    mask = dropout_mask((4, 3), 1.0, np.random.default_rng(0))
    np.testing.assert_array_equal(mask, 0.0)


def test_train_mode_is_seeded(middle_net: tuple[LLaPorNet, PredictorFeatures]) -> None:
    net, feat = middle_net
    net.dropout = 0.3
    first, _ = forward(net, feat, train_mode=True, rng=np.random.default_rng(5))
    second, _ = forward(net, feat, train_mode=True, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(first, second)

    with pytest.raises(ValueError, match="random generator"):
        forward(net, feat, train_mode=True)


def test_feature_shape_mismatch(middle_net: tuple[LLaPorNet, PredictorFeatures]) -> None:
    net, _ = middle_net
    wrong = random_features(np.random.default_rng(0), 4, 3, 6)
    with pytest.raises(ShapeMismatchError):
        forward(net, wrong)
    with pytest.raises(ShapeMismatchError):
        PredictorFeatures(np.zeros((3, 2)), np.zeros((4, 5)), np.zeros((4, 5)))


def test_topk_invariant_under_monotone_transform(middle_net: tuple[LLaPorNet, PredictorFeatures]) -> None:
    net, feat = middle_net
    before = predict_topk(net, feat, 3)
    net.params["head.weight"] *= 2.5
    net.params["head.bias"] *= 2.5
    np.testing.assert_array_equal(predict_topk(net, feat, 3), before)


# Losses ###########################################################################################


def test_hybrid_loss_reduces_to_bce() -> None:
    rng = np.random.default_rng(6)
    logits = rng.standard_normal((8, 5))
    labels = (rng.random((8, 5)) < 0.3).astype(float)
    bce, _ = bce_loss(logits, labels)

    loss, _ = hybrid_loss(logits, labels, np.ones(5), focal_weight=0.7, gamma=0.0)
    assert loss == pytest.approx(1.7 * bce, abs=1e-9)

    expert_only, _ = hybrid_loss(logits, labels, np.full(5, 2.0), focal_weight=0.0, gamma=2.0)
    assert expert_only == pytest.approx(bce / 2.0, abs=1e-12)


def test_focal_term_vanishes_when_confident() -> None:
    labels = np.eye(4)
    logits = np.where(labels > 0, 14.0, -14.0)
    focal_and_expert, _ = hybrid_loss(logits, labels, np.ones(4), focal_weight=1.0, gamma=2.0)
    expert_only, _ = hybrid_loss(logits, labels, np.ones(4), focal_weight=0.0, gamma=2.0)
    assert focal_and_expert - expert_only < 1e-12


def test_hybrid_loss_needs_positive_frequencies() -> None:
    with pytest.raises(ValueError, match="positive"):
        hybrid_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.array([1.0, 0.0, 1.0]))


@pytest.mark.parametrize("seed", range(100))
def test_hybrid_loss_gradient(seed: int) -> None:
    rng = np.random.default_rng(seed)
    logits = rng.uniform(-3, 3, (8, 6))
    labels = (rng.random((8, 6)) < 0.4).astype(float)
    frequencies = rng.uniform(0.2, 2.0, 6)
    _, analytic = hybrid_loss(logits, labels, frequencies, 1.0, 2.0)

    h = 1e-6
    numeric = np.zeros_like(logits)
    for index in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[index] += h
        down[index] -= h
        numeric[index] = (
            hybrid_loss(up, labels, frequencies, 1.0, 2.0)[0] - hybrid_loss(down, labels, frequencies, 1.0, 2.0)[0]
        ) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-9)


def test_network_gradient(middle_net: tuple[LLaPorNet, PredictorFeatures]) -> None:
    net, feat = middle_net
    labels = (np.random.default_rng(9).random((feat.num_samples, net.num_experts)) < 0.4).astype(float)

    def loss_value() -> float:
        logits, _ = _forward(net, feat, False, None)
        return bce_loss(logits, labels)[0]

    logits, cache = _forward(net, feat, False, None)
    grads = _backward(net, cache, bce_loss(logits, labels)[1])
    assert set(grads) == set(net.params)

    h = 1e-6
    for name in ("block0.weight", "residual1.bias", "gate.weight", "gate.bias", "head.weight"):
        for index in list(np.ndindex(net.params[name].shape))[:4]:
            original = net.params[name][index]
            net.params[name][index] = original + h
            up = loss_value()
            net.params[name][index] = original - h
            down = loss_value()
            net.params[name][index] = original
            assert grads[name][index] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-9), name


# Training #########################################################################################


def test_lr_schedule() -> None:
    base = 1e-3
    assert lr_at_epoch(0, base, 5, 30) == pytest.approx(base / 5, abs=1e-12)
    assert lr_at_epoch(4, base, 5, 30) == pytest.approx(base, abs=1e-12)
    assert lr_at_epoch(5, base, 5, 30) == pytest.approx(base, abs=1e-12)
    for epoch in range(5, 30):
        expected = base * 0.5 * (1 + math.cos(math.pi * (epoch - 5) / 25))
        assert lr_at_epoch(epoch, base, 5, 30) == pytest.approx(expected, abs=1e-12)


def test_zero_learning_rate_keeps_parameters() -> None:
    rng = np.random.default_rng(0)
    basis = pca_fit(rng.standard_normal((32, 16)), 4)
    net = init_net(1, LayerGroup.INPUT, basis, 8, 8, 0.1, rng)
    before = {name: value.copy() for name, value in net.params.items()}

    feat = random_features(rng, 32, 4, 8)
    labels = feat.active_onehot
    train_net(net, feat, labels, np.ones(8), quick_config(lr=0.0, epochs=3), rng)
    for name, value in net.params.items():
        np.testing.assert_array_equal(value, before[name])


def test_train_is_deterministic(small_spec: ModelSpec, trace_config: TraceGenConfig) -> None:
    trace = generate_trace(trace_config, small_spec, 24, 0)
    first = train([trace], FAST_TRAIN).model
    second = train([trace], FAST_TRAIN).model
    assert first.nets.keys() == second.nets.keys() == set(range(1, small_spec.num_layers))
    for layer, net in first.nets.items():
        for name, value in net.params.items():
            np.testing.assert_array_equal(value, second.nets[layer].params[name])
    assert first.nets[2].num_residual == 2
    assert first.nets[1].num_residual == 0


def test_train_errors(small_spec: ModelSpec, trace_config: TraceGenConfig) -> None:
    with pytest.raises(ValueError, match="non-empty"):
        train([Trace.empty(small_spec, 4, 0)], FAST_TRAIN)

    other = replace(small_spec, experts_per_layer=4)
    traces = [generate_trace(trace_config, small_spec, 4, 0), generate_trace(trace_config, other, 4, 0)]
    with pytest.raises(ShapeMismatchError):
        train(traces, FAST_TRAIN)


@pytest.mark.slow
def test_deterministic_routing_is_learned() -> None:
    spec = ModelSpec(num_layers=4, experts_per_layer=8, top_k=1, expert_bytes=1, hidden_dim=16)
    trace = generate_trace(learnable_config(correlation=1.0), spec, 512, 0)
    result = train([trace], quick_config())

    for curve in result.loss_curves.values():
        assert curve[-1] < curve[0]
    accuracy = layer_accuracy(LLaPorPredictor(result.model), trace, 1, 1, AccuracyMode.EXACT)
    assert min(accuracy[1:]) >= 0.99


@pytest.mark.slow
def test_trained_predictor_beats_statistics() -> None:
    spec = spec_from_config(ModelConfig())
    config = TraceGenConfig()
    model = train([generate_trace(config, spec, 4096, 0)], TrainConfig()).model
    held_out = generate_trace(config, spec, 1024, 1)

    # Top-4 predictions scored against the true top-6; layer 0 has no previous layer to learn from
    learned = layer_accuracy(LLaPorPredictor(model), held_out, 4, 6, AccuracyMode.SLIDING)[1:]
    stats = layer_accuracy(StatsPredictor(spec, model.table, 1.0), held_out, 4, 6, AccuracyMode.SLIDING)[1:]
    assert np.mean(learned) >= np.mean(stats) + 0.10, (learned, stats)


def test_fine_tune_leaves_model_untouched(small_spec: ModelSpec, trace_config: TraceGenConfig) -> None:
    model = train([generate_trace(trace_config, small_spec, 24, 0)], FAST_TRAIN).model
    before = {layer: {n: v.copy() for n, v in net.params.items()} for layer, net in model.nets.items()}

    tuned = fine_tune(model, generate_trace(trace_config, small_spec, 24, 1), steps=2)
    for layer, net in model.nets.items():
        for name, value in net.params.items():
            np.testing.assert_array_equal(value, before[layer][name])
    assert any(
        not np.array_equal(tuned.nets[layer].params["head.bias"], before[layer]["head.bias"]) for layer in model.nets
    )

    with pytest.raises(ShapeMismatchError):
        fine_tune(model, generate_trace(trace_config, replace(small_spec, top_k=1), 4, 0), steps=1)


def test_checkpoint_round_trip(tmp_path: Path, small_spec: ModelSpec, trace_config: TraceGenConfig) -> None:
    trace = generate_trace(trace_config, small_spec, 24, 0)
    model = train([trace], FAST_TRAIN).model
    path = tmp_path / "predictor.npz"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)

    assert loaded.spec == model.spec
    assert loaded.train_config == model.train_config
    assert loaded.trace_checksum == model.trace_checksum
    assert loaded.validation_hit_rate == model.validation_hit_rate
    np.testing.assert_array_equal(loaded.table.counts, model.table.counts)
    for layer in range(1, small_spec.num_layers):
        np.testing.assert_array_equal(
            LLaPorPredictor(loaded).predict_tokens(trace, 0, layer, 1, 0),
            LLaPorPredictor(model).predict_tokens(trace, 0, layer, 1, 0),
        )


def test_corrupted_checkpoint(tmp_path: Path) -> None:
    path = tmp_path / "predictor.npz"
    path.write_bytes(b"not an archive")
    with pytest.raises(CheckpointError, match="Invalid predictor checkpoint"):
        load_checkpoint(path)

    np.savez(path, metadata=np.array('{"format_version": 99}'))
    with pytest.raises(CheckpointError, match="format version 99"):
        load_checkpoint(path)


# Baselines and accuracy ###########################################################################


def test_stats_predict_uses_table() -> None:
    table = HotExpertTable(np.array([[5, 9, 1, 9], [0, 0, 3, 0]]))
    assert stats_predict(table, 0, 2) == [1, 3]
    assert stats_predict(table, 1, 1) == [2]
    assert table.smoothed_frequencies(0).mean() == pytest.approx(1.0)


def test_gate_reuse_predict() -> None:
    weights = np.array([[0.1, 0.5, 0.2, 0.2], [0.4, 0.1, 0.1, 0.4]])
    np.testing.assert_array_equal(gate_reuse_predict(weights, 2), [[1, 2], [0, 3]])


def test_oracle_noise_predict() -> None:
    rng = np.random.default_rng(0)
    assert oracle_noise_predict([3, 1], 1.0, rng, 2, 8) == [3, 1]
    wrong = oracle_noise_predict([3, 1], 0.0, rng, 2, 8)
    assert not set(wrong) & {3, 1}
    assert len(set(wrong)) == 2


def test_oracle_noise_hit_rate(small_spec: ModelSpec, trace_config: TraceGenConfig) -> None:
    trace = generate_trace(trace_config, small_spec, 2000, 0)
    predictor = OracleNoisePredictor(small_spec, HotExpertTable.from_traces([trace]), 0.7)
    predicted = predictor.predict_tokens(trace, 0, 3, 1, seed=4)
    assert precision(predicted, trace.active[:, 3]) == pytest.approx(0.7, abs=0.03)
    np.testing.assert_array_equal(predicted, predictor.predict_tokens(trace, 0, 3, 1, seed=4))


def test_gate_reuse_predictor_falls_back(small_spec: ModelSpec, trace_config: TraceGenConfig) -> None:
    trace = generate_trace(trace_config, small_spec, 6, 0)
    table = HotExpertTable.from_traces([trace])
    predictor = GateReusePredictor(small_spec, table, 1.0)
    np.testing.assert_array_equal(
        predictor.predict_tokens(trace, 0, 1, 2, 0),
        StatsPredictor(small_spec, table, 1.0).predict_tokens(trace, 0, 1, 2, 0),
    )
    np.testing.assert_array_equal(
        predictor.predict_tokens(trace, 0, 3, 1, 0),
        gate_reuse_predict(trace.gate_weights[:, 2], small_spec.top_k),
    )


def test_eval_accuracy_modes() -> None:
    true = [7, 2, 5, 0, 1, 4, 3, 6]
    for mode in AccuracyMode:
        assert eval_accuracy(true[:4], true[:6], mode)
    assert eval_accuracy(true[1:5], true[:6], AccuracyMode.SLIDING)
    assert not eval_accuracy(true[1:5], true[:4], AccuracyMode.EXACT)
    with pytest.raises(ValueError, match="k <= k'"):
        eval_accuracy(true[:6], true[:4], AccuracyMode.SLIDING)


def test_layer_accuracy_matches_recount(small_spec: ModelSpec, trace_config: TraceGenConfig) -> None:
    trace = generate_trace(replace(trace_config, num_iterations=2), small_spec, 16, 0)
    predictor = StatsPredictor(small_spec, HotExpertTable.from_traces([trace]), 1.0)
    rates = layer_accuracy(predictor, trace, 2, 4, AccuracyMode.SLIDING)

    for layer, rate in enumerate(rates):
        hits = 0
        for iteration in range(2):
            rows = trace.iteration_tokens(iteration)
            predicted = predictor.predict_tokens(trace, iteration, layer, 1, 0, 2)
            truth = true_topk(trace, rows, layer, 4)
            hits += sum(set(p) <= set(t) for p, t in zip(predicted.tolist(), truth.tolist(), strict=True))
        assert rate == hits / trace.num_tokens


def test_perfect_oracle_is_always_right(small_spec: ModelSpec, trace_config: TraceGenConfig) -> None:
    trace = generate_trace(trace_config, small_spec, 32, 0)
    predictor = OracleNoisePredictor(small_spec, HotExpertTable.from_traces([trace]), 1.0)
    assert layer_accuracy(predictor, trace, 4, 6, AccuracyMode.SLIDING) == [1.0] * small_spec.num_layers


def test_plan_residency() -> None:
    table = HotExpertTable(np.array([[5, 9, 1], [7, 0, 3]]))
    assert plan_residency(table, 3 * 100, 100) == {(0, 1), (1, 0), (0, 0)}
    assert plan_residency(table, 299, 100) == {(0, 1), (1, 0)}
    assert plan_residency(table, 0, 100) == frozenset()

    mixtral = ModelSpec.from_preset("mixtral")
    counts = np.arange(mixtral.num_layers * mixtral.experts_per_layer).reshape(mixtral.num_layers, -1)
    assert len(plan_residency(HotExpertTable(counts), GIB, mixtral.expert_bytes)) == 3
