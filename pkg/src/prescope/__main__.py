import logging
import sys
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Any

import click
from rich.logging import RichHandler

from prescope.config import get_config
from prescope.constants import VERSION
from prescope.costmodel import CostParams, fit_cost_params, params_from_config, read_samples, write_calibration
from prescope.errors import PrescopeError
from prescope.experiment import build_predictor, report, run_experiment
from prescope.golden import list_scenarios, replay_golden
from prescope.predictor import AccuracyMode, LLaPorPredictor, layer_accuracy, load_checkpoint, save_checkpoint, train
from prescope.simulator import simulate, write_metrics, write_timeline
from prescope.utils import parse_policy
from prescope.workload import generate_trace, read_trace, spec_from_config, write_trace

logger = logging.getLogger()
logger.setLevel("INFO")
logger.addHandler(RichHandler(show_path=False))

EXIT_CONFIG_ERROR = 1
EXIT_CELL_FAILURES = 2
EXIT_GOLDEN_MISMATCH = 3

################################################################################

config_file_argument_data = {
    "metavar": "FILENAME",
    "type": click.Path(exists=True, resolve_path=True, path_type=Path),
    "help": "Provide a specific PreScope config file.",
}

trace_argument_data = {
    "metavar": "FILENAME",
    "type": click.Path(exists=True, dir_okay=False, resolve_path=True, path_type=Path),
    "required": True,
    "help": "Routing trace written by gen-trace.",
}

seed_argument_data = {
    "type": int,
    "default": 0,
    "show_default": True,
    "help": "Seed for trace sampling and predictor noise.",
}


@contextmanager
def exit_on_error() -> Iterator[None]:
    try:
        yield
    except PrescopeError as e:
        logger.error(str(e))  # noqa: TRY400
        sys.exit(EXIT_CONFIG_ERROR)


def _overrides(**values: Any) -> dict[str, Any]:
    return {key: value for key, value in values.items() if value is not None}


@click.group(
    context_settings={
        "help_option_names": ["-h", "--help"],
        "max_content_width": 120,
    },
)
@click.version_option(
    VERSION,
    "-V",
    "--version",
    message=f"prescope, version {VERSION}",
)
@click.option(
    "-v",
    "--verbose",
    "verbose",
    help="Enable verbose output",
    is_flag=True,
)
def cli(verbose: bool) -> None:
    """PreScope - Prefetch-aware expert scheduling for offloaded MoE inference."""
    if verbose:
        logger.setLevel("DEBUG")
        logger.debug("Verbose output enabled")


# Trace Commands ###############################################################


@cli.command(name="gen-trace")
@click.option("-f", "--config", "config_file", **config_file_argument_data)  # type: ignore[arg-type]
@click.option("-s", "--seed", **seed_argument_data)  # type: ignore[arg-type]
@click.option("-b", "--batch", type=int, help="Batch size, defaults to the first configured batch size.")
@click.option("-o", "--out", type=click.Path(dir_okay=False, path_type=Path), required=True, metavar="FILENAME")
def gen_trace_command(config_file: Path | None, seed: int, batch: int | None, out: Path) -> None:
    """Sample a synthetic routing trace."""
    logger.debug("Command: gen-trace")

    with exit_on_error():
        config = get_config(config_file)
        spec = spec_from_config(config.model)
        trace = generate_trace(config.trace, spec, batch or config.batch_sizes[0], seed)
        write_trace(trace, out)


@cli.command(name="calibrate")
@click.option(
    "--samples",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
    metavar="FILENAME",
    help="CSV with 'tokens' and 'ticks' columns measured for one CPU expert.",
)
@click.option("-f", "--config", "config_file", **config_file_argument_data)  # type: ignore[arg-type]
@click.option("-o", "--out", type=click.Path(dir_okay=False, path_type=Path), required=True, metavar="FILENAME")
def calibrate_command(samples: Path, config_file: Path | None, out: Path) -> None:
    """
    Fit the CPU expert cost line to measured samples.

    The transfer, GPU and attention times are taken from the config.
    """
    logger.debug("Command: calibrate")

    with exit_on_error():
        config = get_config(config_file)
        fit = fit_cost_params(read_samples(samples))
        logger.info(f"Fitted beta={fit.beta:.3f}, startup={fit.startup:.1f} (R^2={fit.r_squared:.4f})")
        if fit.r_squared < 0.9:
            logger.warning(f"CPU cost is poorly explained by a line (R^2={fit.r_squared:.4f})")

        try:
            params = CostParams(
                t_io=config.cost.t_io,
                t_g=config.cost.t_g,
                t_attn=config.cost.t_attn,
                beta=max(0.0, fit.beta),
                startup=max(0.0, fit.startup),
            )
        except ValueError as e:
            logger.error(str(e))  # noqa: TRY400
            sys.exit(EXIT_CONFIG_ERROR)
        write_calibration(params, out)


# Predictor Commands ###########################################################


@cli.command(name="train-predictor")
@click.option(
    "-t",
    "--trace",
    "traces",
    metavar="FILENAME",
    type=click.Path(exists=True, dir_okay=False, resolve_path=True, path_type=Path),
    multiple=True,
    required=True,
    help="Training trace, can be given multiple times.",
)
@click.option("-f", "--config", "config_file", **config_file_argument_data)  # type: ignore[arg-type]
@click.option("-o", "--out", type=click.Path(dir_okay=False, path_type=Path), required=True, metavar="FILENAME")
def train_predictor_command(traces: tuple[Path, ...], config_file: Path | None, out: Path) -> None:
    """Train the layer-group-aware activation predictor."""
    logger.debug("Command: train-predictor")

    with exit_on_error():
        config = get_config(config_file)
        result = train([read_trace(path) for path in traces], config.train)
        logger.info(f"Validation hit rate: {result.model.validation_hit_rate:.2%}")
        save_checkpoint(result.model, out)


@cli.command(name="eval-predictor")
@click.option(
    "--ckpt",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
    metavar="FILENAME",
)
@click.option("-t", "--trace", **trace_argument_data)  # type: ignore[arg-type]
@click.option(
    "--mode",
    type=click.Choice([mode.value for mode in AccuracyMode]),
    default=AccuracyMode.SLIDING.value,
    show_default=True,
)
@click.option("--k", "k", type=int, default=4, show_default=True)
@click.option("--kprime", type=int, default=6, show_default=True)
@click.option("-s", "--seed", **seed_argument_data)  # type: ignore[arg-type]
def eval_predictor_command(ckpt: Path, trace: Path, mode: str, k: int, kprime: int, seed: int) -> None:
    """Print the prediction accuracy per layer."""
    logger.debug("Command: eval-predictor")

    with exit_on_error():
        predictor = LLaPorPredictor(load_checkpoint(ckpt))
        routing = read_trace(trace)
        if routing.spec != predictor.spec:
            logger.error(f"Trace '{trace}' does not match the model shape of checkpoint '{ckpt}'")
            sys.exit(EXIT_CONFIG_ERROR)

        for layer, accuracy in enumerate(layer_accuracy(predictor, routing, k, kprime, AccuracyMode(mode), seed)):
            click.echo(f"{layer}\t{routing.spec.group_of(layer).value}\t{accuracy:.4f}")


# Scheduling Commands ##########################################################


policy_argument_data = {
    "metavar": "POLICY",
    "default": "presched",
    "show_default": True,
    "help": "presched, greedy, ondemand, fixed:<c> or oracle.",
}


@cli.command(name="schedule")
@click.option("-p", "--policy", **policy_argument_data)  # type: ignore[arg-type]
@click.option("-t", "--trace", **trace_argument_data)  # type: ignore[arg-type]
@click.option("-f", "--config", "config_file", **config_file_argument_data)  # type: ignore[arg-type]
@click.option("-s", "--seed", **seed_argument_data)  # type: ignore[arg-type]
def schedule_command(policy: str, trace: Path, config_file: Path | None, seed: int) -> None:
    """Print the per-layer scheduling decisions for a trace."""
    logger.debug("Command: schedule")

    with exit_on_error():
        config = get_config(config_file)
        try:
            scheduler_policy = parse_policy(policy)
        except ValueError as e:
            logger.error(str(e))  # noqa: TRY400
            sys.exit(EXIT_CONFIG_ERROR)

        routing = read_trace(trace)
        predictor = build_predictor(config, routing.spec)
        timeline, _ = simulate(
            routing,
            scheduler_policy,
            predictor,
            params_from_config(config.cost),
            seed=seed,
            settings=config.simulator,
        )
        for plan in timeline.plans:
            click.echo(plan)


@cli.command(name="simulate")
@click.option("-p", "--policy", **policy_argument_data)  # type: ignore[arg-type]
@click.option("-t", "--trace", **trace_argument_data)  # type: ignore[arg-type]
@click.option("-f", "--config", "config_file", **config_file_argument_data)  # type: ignore[arg-type]
@click.option("-s", "--seed", **seed_argument_data)  # type: ignore[arg-type]
@click.option("-o", "--out", type=click.Path(file_okay=False, path_type=Path), required=True, metavar="PATH")
def simulate_command(policy: str, trace: Path, config_file: Path | None, seed: int, out: Path) -> None:
    """Simulate one policy and write timeline and metrics."""
    logger.debug("Command: simulate")

    with exit_on_error():
        config = get_config(config_file)
        try:
            scheduler_policy = parse_policy(policy)
        except ValueError as e:
            logger.error(str(e))  # noqa: TRY400
            sys.exit(EXIT_CONFIG_ERROR)

        routing = read_trace(trace)
        predictor = build_predictor(config, routing.spec)
        timeline, metrics = simulate(
            routing,
            scheduler_policy,
            predictor,
            params_from_config(config.cost),
            seed=seed,
            settings=config.simulator,
        )
        write_timeline(timeline, out / "timeline.jsonl")
        write_metrics(metrics, out / "metrics.json")
        logger.info(f"{scheduler_policy}: makespan {metrics.makespan}, throughput {metrics.throughput:.2f} tokens/s")


# Experiment Commands ##########################################################


@cli.command(name="run-experiment")
@click.option("-f", "--config", "config_file", **config_file_argument_data)  # type: ignore[arg-type]
@click.option(
    "-s",
    "--seed",
    "seeds",
    type=int,
    multiple=True,
    help="Seed of the experiment grid, replaces the configured seeds. Can be given multiple times.",
)
@click.option(
    "-o",
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    help="Output directory, replaces the configured one.",
    metavar="PATH",
)
def run_experiment_command(config_file: Path | None, seeds: tuple[int, ...], out: Path | None) -> None:
    """Run every configured policy, batch size and seed."""
    logger.debug("Command: run-experiment")

    with exit_on_error():
        config = get_config(
            config_file,
            _overrides(seeds=list(seeds) or None, output_dir=str(out) if out else None),
        )
        result = run_experiment(config)

    if result.failures:
        for cell in result.failures:
            logger.error(f"{cell.policy} batch {cell.batch} seed {cell.seed}: {cell.record['error']}")
        sys.exit(EXIT_CELL_FAILURES)


@cli.command(name="replay-golden")
@click.argument("scenario_ids", nargs=-1, metavar="[SCENARIO]...")
def replay_golden_command(scenario_ids: tuple[str, ...]) -> None:
    """
    Replay hand-built scenarios tick by tick.

    Without arguments all bundled scenarios are replayed.
    """
    logger.debug("Command: replay-golden")

    mismatches = 0
    with exit_on_error():
        for scenario_id in scenario_ids or list_scenarios():
            diff = replay_golden(scenario_id)
            click.echo(diff.render())
            mismatches += not diff.passed

    if mismatches:
        logger.error(f"{mismatches} golden scenarios do not match")
        sys.exit(EXIT_GOLDEN_MISMATCH)


@cli.command(name="report")
@click.argument(
    "metrics_dir",
    metavar="PATH",
    type=click.Path(file_okay=False, resolve_path=True, path_type=Path),
)
@click.option(
    "-o",
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    help="Directory for the tables, defaults to the parent of the metrics directory.",
    metavar="PATH",
)
def report_command(metrics_dir: Path, out: Path | None) -> None:
    """Summarize metrics records into CSV and markdown tables."""
    logger.debug("Command: report")

    summary = report(metrics_dir, out or metrics_dir.parent)
    logger.info(f"Summarized {len(summary.records)} metrics records")
    if summary.errors:
        sys.exit(EXIT_CONFIG_ERROR)


################################################################################

if __name__ == "__main__":
    cli()
