import csv
import io
import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from statistics import mean
from typing import Any

import jsonschema
import numpy as np
from natsort import natsorted
from omegaconf import DictConfig

from prescope.config import to_canonical_yaml
from prescope.constants import DEFAULT_SUMMARY_TEMPLATE, TICK_UNIT, VERSION
from prescope.costmodel import CostParams, params_from_config
from prescope.errors import ShapeMismatchError
from prescope.policytype import PolicyKind, SchedulerPolicy
from prescope.predictor import (
    AccuracyMode,
    GateReusePredictor,
    HotExpertTable,
    LLaPorPredictor,
    OracleNoisePredictor,
    RoutingPredictor,
    StatsPredictor,
    layer_accuracy,
    load_checkpoint,
    plan_residency,
    precision,
    train,
)
from prescope.simulator import simulate, verify_timeline
from prescope.utils import parse_policy, write_text_atomic
from prescope.workload import ModelSpec, Trace, generate_trace, spec_from_config

logger = logging.getLogger(__name__)

METRICS_DIR = "metrics"

SUMMARY_COLUMNS = [
    "policy",
    "batch",
    "seed",
    "status",
    "makespan",
    "decode_latency",
    "throughput",
    "io_busy_fraction",
    "gpu_idle_fraction",
    "prefetch_issued",
    "prefetch_hits",
    "prefetch_dropped",
]
LATENCY_COLUMNS = ["policy", "batch", "cells", "mean_makespan", "mean_decode_latency", "mean_throughput"]
GAP_COLUMNS = ["policy", "batch", "seed", "layer", "latency", "cpu_gpu_gap"]
ACCURACY_COLUMNS = ["batch", "seed", "layer", "accuracy"]

METRICS_RECORD_SCHEMA = {
    "type": "object",
    "required": ["policy", "batch", "seed", "status"],
    "properties": {
        "policy": {"type": "string"},
        "batch": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "status": {"enum": ["ok", "error"]},
        "error": {"type": "string"},
        "metrics": {
            "type": "object",
            "required": ["makespan", "decode_latency", "throughput", "layer_latency", "cpu_gpu_gap"],
        },
        "accuracy": {"type": "array", "items": {"type": "number"}},
    },
}


def cell_name(policy: str, batch: int, seed: int) -> str:
    return f"{policy.replace(':', '-')}_b{batch}_s{seed}"


################################################################################


def validation_precision(predictor: RoutingPredictor, trace: Trace, seed: int = 0) -> float:
    scores = []
    for iteration in range(trace.num_iterations):
        for layer in range(1, trace.spec.num_layers):
            predicted = predictor.predict_tokens(trace, iteration, layer, 1, seed)
            scores.append(precision(predicted, trace.active[trace.iteration_tokens(iteration), layer]))
    return float(np.mean(scores)) if scores else 1.0


def build_predictor(config: DictConfig, spec: ModelSpec) -> RoutingPredictor:
    settings = config.predictor
    training_trace = generate_trace(config.trace, spec, settings.training_batch, settings.training_seed)
    table = HotExpertTable.from_traces([training_trace])

    predictor: RoutingPredictor
    match settings.kind:
        case "oracle_noise":
            return OracleNoisePredictor(spec, table, settings.hit_rate)
        case "stats":
            predictor = StatsPredictor(spec, table, 1.0)
        case "gate":
            predictor = GateReusePredictor(spec, table, 1.0)
        case "llapor":
            if settings.checkpoint:
                model = load_checkpoint(Path(settings.checkpoint))
                if model.spec != spec:
                    message = f"Checkpoint '{settings.checkpoint}' was trained for a different model shape"
                    raise ShapeMismatchError(message)
            else:
                logger.info(f"Training predictor on {training_trace!r}")
                model = train([training_trace], config.train).model
            return LLaPorPredictor(model)
        case _:
            message = f"Unknown predictor '{settings.kind}'"
            raise ValueError(message)

    predictor.validation_hit_rate = validation_precision(predictor, training_trace)
    return predictor


@dataclass
class CellResult:
    policy: str
    batch: int
    seed: int
    record: dict[str, Any]

    @property
    def failed(self) -> bool:
        return self.record["status"] != "ok"


@dataclass
class ExperimentResult:
    output_dir: Path
    cells: list[CellResult] = field(default_factory=list)

    @property
    def failures(self) -> list[CellResult]:
        return [cell for cell in self.cells if cell.failed]


def _run_trace_cells(
    config: DictConfig,
    spec: ModelSpec,
    params: CostParams,
    predictor: RoutingPredictor,
    residency: frozenset[tuple[int, int]],
    policies: list[SchedulerPolicy],
    batch: int,
    seed: int,
) -> list[CellResult]:
    try:
        trace = generate_trace(config.trace, spec, batch, seed)
        accuracy = layer_accuracy(
            predictor,
            trace,
            config.accuracy_k,
            config.accuracy_kprime,
            AccuracyMode.SLIDING,
            seed,
        )
    except Exception as e:
        logger.exception(f"Trace generation failed for batch {batch}, seed {seed}")
        return [
            CellResult(str(policy), batch, seed, _failure_record(policy, batch, seed, e)) for policy in policies
        ]

    results = []
    for policy in policies:
        try:
            timeline, metrics = simulate(trace, policy, predictor, params, residency, seed, config.simulator)
            violations = verify_timeline(timeline)
            if violations:
                message = f"{len(violations)} timeline violations, first: {violations[0].rule}: {violations[0].detail}"
                raise RuntimeError(message)
            record = {
                "policy": str(policy),
                "batch": batch,
                "seed": seed,
                "status": "ok",
                "metrics": metrics.to_record(),
                "accuracy": accuracy,
            }
            logger.info(f"{cell_name(str(policy), batch, seed)}: makespan {metrics.makespan} {TICK_UNIT}")
        except Exception as e:
            logger.exception(f"Cell {cell_name(str(policy), batch, seed)} failed")
            record = _failure_record(policy, batch, seed, e)
        results.append(CellResult(str(policy), batch, seed, record))
    return results


def _failure_record(policy: SchedulerPolicy, batch: int, seed: int, error: Exception) -> dict[str, Any]:
    return {
        "policy": str(policy),
        "batch": batch,
        "seed": seed,
        "status": "error",
        "error": f"{type(error).__name__}: {error}",
    }


def run_experiment(config: DictConfig) -> ExperimentResult:
    spec = spec_from_config(config.model)
    params = params_from_config(config.cost)
    policies = [parse_policy(policy) for policy in config.policies]

    predictor = build_predictor(config, spec)
    residency: frozenset[tuple[int, int]] = frozenset()
    if config.residency_budget_bytes:
        residency = plan_residency(predictor.table, config.residency_budget_bytes, spec.expert_bytes)
        logger.info(f"Keeping {len(residency)} experts resident on the GPU")

    output_dir = Path(config.output_dir)
    metrics_dir = output_dir / METRICS_DIR
    metrics_dir.mkdir(parents=True, exist_ok=True)
    write_text_atomic(output_dir / "config.yaml", to_canonical_yaml(config))

    grid = [(batch, seed) for batch in config.batch_sizes for seed in config.seeds]
    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as executor:
        futures = [
            executor.submit(_run_trace_cells, config, spec, params, predictor, residency, policies, batch, seed)
            for batch, seed in grid
        ]
        cells = [cell for future in futures for cell in future.result()]

    for cell in cells:
        path = metrics_dir / f"{cell_name(cell.policy, cell.batch, cell.seed)}.json"
        write_text_atomic(path, json.dumps(cell.record, indent=2, sort_keys=True) + "\n")

    report(metrics_dir, output_dir)
    result = ExperimentResult(output_dir, cells)
    logger.info(f"Finished {len(cells)} cells with {len(result.failures)} failures, results in '{output_dir}'")
    return result


################################################################################


@dataclass
class Report:
    records: list[dict[str, Any]]
    errors: list[str]
    gain_columns: list[str]


def read_metrics(metrics_dir: Path) -> tuple[list[dict[str, Any]], list[str]]:
    records, errors = [], []
    if not metrics_dir.is_dir():
        return records, [f"Metrics directory '{metrics_dir}' does not exist"]

    for path in natsorted(metrics_dir.glob("*.json"), key=lambda p: p.name):
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
            jsonschema.validate(record, METRICS_RECORD_SCHEMA)
            records.append(record)
        except json.JSONDecodeError as e:
            errors.append(f"{path.name}: {e}")
        except jsonschema.ValidationError as e:
            errors.append(f"{path.name}: {e.message}")
    return records, errors


def _gain(base: float, presched: float) -> float | None:
    return (base - presched) / base if base else None


def _csv(columns: list[str], rows: list[dict[str, Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


def report(metrics_dir: Path, out_dir: Path | None = None) -> Report:
    """Summarize metrics records into CSV series and a markdown summary, data only."""
    out_dir = out_dir or metrics_dir
    records, errors = read_metrics(metrics_dir)
    records = natsorted(records, key=lambda r: (r["policy"], r["batch"], r["seed"]))
    for error in errors:
        logger.error(f"Skipping metrics file {error}")

    ok = [record for record in records if record["status"] == "ok"]
    makespans = {(r["policy"], r["batch"], r["seed"]): r["metrics"]["makespan"] for r in ok}
    baselines = natsorted({r["policy"] for r in records if r["policy"] != PolicyKind.PRESCHED.value})
    has_presched = any(r["policy"] == PolicyKind.PRESCHED.value for r in records)
    gain_columns = [f"gain_vs_{baseline}" for baseline in baselines] if has_presched else []

    summary_rows = []
    for record in records:
        row = {key: record[key] for key in ("policy", "batch", "seed", "status")}
        if record["status"] == "ok":
            row.update({key: record["metrics"][key] for key in SUMMARY_COLUMNS[4:]})
            if record["policy"] == PolicyKind.PRESCHED.value:
                for baseline, column in zip(baselines, gain_columns, strict=True):
                    base = makespans.get((baseline, record["batch"], record["seed"]))
                    row[column] = _gain(base, row["makespan"]) if base is not None else None
        summary_rows.append(row)

    grouped: dict[tuple[str, int], list[dict[str, Any]]] = defaultdict(list)
    for record in ok:
        grouped[(record["policy"], record["batch"])].append(record["metrics"])
    latency_rows = [
        {
            "policy": policy,
            "batch": batch,
            "cells": len(cells),
            "mean_makespan": mean(m["makespan"] for m in cells),
            "mean_decode_latency": mean(m["decode_latency"] for m in cells),
            "mean_throughput": mean(m["throughput"] for m in cells),
        }
        for (policy, batch), cells in natsorted(grouped.items(), key=lambda item: item[0])
    ]

    gap_rows = [
        {
            "policy": record["policy"],
            "batch": record["batch"],
            "seed": record["seed"],
            "layer": layer,
            "latency": latency,
            "cpu_gpu_gap": gap,
        }
        for record in ok
        for layer, (latency, gap) in enumerate(
            zip(record["metrics"]["layer_latency"], record["metrics"]["cpu_gpu_gap"], strict=True),
        )
    ]

    accuracy_rows, seen = [], set()
    for record in ok:
        key = (record["batch"], record["seed"])
        if key in seen or "accuracy" not in record:
            continue
        seen.add(key)
        accuracy_rows += [
            {"batch": key[0], "seed": key[1], "layer": layer, "accuracy": value}
            for layer, value in enumerate(record["accuracy"])
        ]

    write_text_atomic(out_dir / "summary.csv", _csv(SUMMARY_COLUMNS + gain_columns, summary_rows))
    write_text_atomic(out_dir / "latency_vs_batch.csv", _csv(LATENCY_COLUMNS, latency_rows))
    write_text_atomic(out_dir / "layer_gap.csv", _csv(GAP_COLUMNS, gap_rows))
    write_text_atomic(out_dir / "accuracy_per_layer.csv", _csv(ACCURACY_COLUMNS, accuracy_rows))

    gains = []
    if has_presched:
        for baseline, column in zip(baselines, gain_columns, strict=True):
            by_batch: dict[int, list[float]] = defaultdict(list)
            for row in summary_rows:
                if row.get(column) is not None:
                    by_batch[row["batch"]].append(row[column])
            gains += [
                {"baseline": baseline, "batch": batch, "mean_gain": f"{mean(values):.2%}"}
                for batch, values in sorted(by_batch.items())
            ]
    markdown = DEFAULT_SUMMARY_TEMPLATE.render(
        version=VERSION,
        tick_unit=TICK_UNIT,
        rows=[
            {
                "policy": row["policy"],
                "batch": row["batch"],
                "seed": row["seed"],
                "makespan": row.get("makespan", "-"),
                "decode_latency": f"{row['decode_latency']:.1f}" if "decode_latency" in row else "-",
                "throughput": f"{row['throughput']:.2f}" if "throughput" in row else "-",
                "status": row["status"],
            }
            for row in summary_rows
        ],
        gains=gains,
        failures=[
            {"cell": cell_name(r["policy"], r["batch"], r["seed"]), "error": r.get("error", "")}
            for r in records
            if r["status"] != "ok"
        ],
    )
    write_text_atomic(out_dir / "summary.md", markdown)

    return Report(records, errors, gain_columns)
