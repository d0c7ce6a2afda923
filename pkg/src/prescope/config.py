import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from omegaconf import MISSING, DictConfig, OmegaConf

from prescope.constants import DEFAULT_CONFIG_LOCATION, DEFAULT_OUTPUT_DIR, MODEL_PRESETS
from prescope.errors import ConfigError
from prescope.utils import parse_policy

logger = logging.getLogger(__name__)

PREDICTOR_KINDS = ["llapor", "stats", "gate", "oracle_noise"]


@dataclass
class GroupKnobs:
    similarity: float = 0.5
    correlation: float = 0.5
    skew: float = 0.5


@dataclass
class TraceGenConfig:
    input: GroupKnobs = field(
        default_factory=lambda: GroupKnobs(similarity=0.5, correlation=0.7, skew=0.6),
    )
    middle: GroupKnobs = field(
        default_factory=lambda: GroupKnobs(similarity=0.9, correlation=0.3, skew=1.2),
    )
    output: GroupKnobs = field(
        default_factory=lambda: GroupKnobs(similarity=0.5, correlation=0.7, skew=0.6),
    )
    noise: float = 0.5
    num_iterations: int = 1
    model_seed: int = 0


@dataclass
class ModelConfig:
    preset: Optional[str] = "mixtral-desk"
    num_layers: Optional[int] = None
    experts_per_layer: Optional[int] = None
    top_k: Optional[int] = None
    expert_bytes: Optional[int] = None
    hidden_dim: Optional[int] = None
    group_bounds: Optional[list[int]] = None


@dataclass
class CostConfig:
    t_io: int = 4000
    t_g: int = 500
    t_attn: int = 3000
    beta: float = 50.0
    startup: float = 2000.0
    calibration_file: Optional[str] = None


@dataclass
class GroupTrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    pca_dim: int = 8


@dataclass
class TrainConfig:
    focal_weight: float = 1.0
    gamma: float = 2.0
    epochs: int = 30
    warmup_epochs: int = 5
    batch_size: int = 64
    hidden_width: int = 64
    dropout: float = 0.1
    noise_std: float = 0.05
    mask_rate: float = 0.05
    seed: int = 0
    input: GroupTrainConfig = field(default_factory=GroupTrainConfig)
    middle: GroupTrainConfig = field(
        default_factory=lambda: GroupTrainConfig(lr=3e-3, weight_decay=1e-3, pca_dim=16),
    )
    output: GroupTrainConfig = field(default_factory=GroupTrainConfig)


@dataclass
class PredictorConfig:
    kind: str = "oracle_noise"
    hit_rate: float = 0.9
    checkpoint: Optional[str] = None
    # Sequences sampled for offline training when kind is llapor without a checkpoint
    training_batch: int = 512
    training_seed: int = 1_000_003


@dataclass
class SimulatorConfig:
    cpu_slots: int = 1
    prefetch_slots: Optional[int] = None
    hit_window: int = 32


# For internal use only
@dataclass
class Internal:
    config_path: Optional[Path] = MISSING


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    trace: TraceGenConfig = field(default_factory=TraceGenConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    policies: list[str] = field(default_factory=lambda: ["presched", "greedy", "ondemand"])
    batch_sizes: list[int] = field(default_factory=lambda: [16])
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = DEFAULT_OUTPUT_DIR
    residency_budget_bytes: int = 0
    workers: int = 1
    accuracy_k: int = 4
    accuracy_kprime: int = 6
    internal: Internal = field(default_factory=Internal)


################################################################################


def check_trace_config(config: TraceGenConfig | DictConfig) -> None:
    for name in ("input", "middle", "output"):
        knobs = config[name] if isinstance(config, DictConfig) else getattr(config, name)
        if not 0.0 <= knobs.similarity <= 1.0:
            message = f"trace.{name}.similarity must be in [0, 1], got {knobs.similarity}"
            raise ConfigError(message)
        if not 0.0 <= knobs.correlation <= 1.0:
            message = f"trace.{name}.correlation must be in [0, 1], got {knobs.correlation}"
            raise ConfigError(message)
        if knobs.skew < 0.0:
            message = f"trace.{name}.skew must be >= 0, got {knobs.skew}"
            raise ConfigError(message)

    if config.noise < 0.0:
        message = f"trace.noise must be >= 0, got {config.noise}"
        raise ConfigError(message)
    if config.num_iterations < 1:
        message = f"trace.num_iterations must be >= 1, got {config.num_iterations}"
        raise ConfigError(message)


def check_train_config(config: TrainConfig | DictConfig) -> None:
    if config.focal_weight < 0 or config.gamma < 0:
        message = f"train.focal_weight and train.gamma must be >= 0, got {config.focal_weight}, {config.gamma}"
        raise ConfigError(message)
    if not 0 <= config.warmup_epochs <= config.epochs:
        message = f"train.warmup_epochs must be within [0, epochs], got {config.warmup_epochs}"
        raise ConfigError(message)
    if not 0.0 <= config.dropout <= 1.0 or not 0.0 <= config.mask_rate <= 1.0:
        message = "train.dropout and train.mask_rate must be within [0, 1]"
        raise ConfigError(message)


def validate(config: DictConfig) -> None:
    if config.model.preset and config.model.preset not in MODEL_PRESETS:
        message = f"Unknown model preset '{config.model.preset}', expected one of: {', '.join(MODEL_PRESETS)}"
        raise ConfigError(message)

    check_trace_config(config.trace)
    check_train_config(config.train)

    if not config.policies:
        message = "At least one policy is required"
        raise ConfigError(message)
    for policy in config.policies:
        try:
            parse_policy(policy)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    if not config.seeds:
        message = "At least one seed is required"
        raise ConfigError(message)
    if not config.batch_sizes or any(batch < 1 for batch in config.batch_sizes):
        message = f"batch_sizes must be a non-empty list of positive counts, got {list(config.batch_sizes)}"
        raise ConfigError(message)

    if config.predictor.kind not in PREDICTOR_KINDS:
        message = f"Unknown predictor '{config.predictor.kind}', expected one of: {', '.join(PREDICTOR_KINDS)}"
        raise ConfigError(message)
    if not 0.0 <= config.predictor.hit_rate <= 1.0:
        message = f"predictor.hit_rate must be in [0, 1], got {config.predictor.hit_rate}"
        raise ConfigError(message)

    for referenced in (config.predictor.checkpoint, config.cost.calibration_file):
        if referenced and not Path(referenced).exists():
            message = f"Referenced file '{referenced}' does not exist"
            raise ConfigError(message)

    if config.simulator.cpu_slots < 1:
        message = f"simulator.cpu_slots must be >= 1, got {config.simulator.cpu_slots}"
        raise ConfigError(message)


def get_config(config_file: Path | None = None, overrides: dict[str, Any] | None = None) -> DictConfig:
    config = OmegaConf.structured(ExperimentConfig)

    if not config_file and DEFAULT_CONFIG_LOCATION.exists():
        config_file = DEFAULT_CONFIG_LOCATION.resolve(strict=True).absolute()

    config.internal.config_path = config_file
    if config_file:
        try:
            loaded_config = OmegaConf.load(config_file)
            config = OmegaConf.merge(config, loaded_config)

            logger.info(f"Loaded config from '{config_file}'")
        except Exception as e:
            logger.exception(f"Failed to load config from {config_file}")
            message = f"Invalid config file '{config_file}': {e}"
            raise ConfigError(message) from e

    if overrides:
        config = OmegaConf.merge(config, overrides)

    assert OmegaConf.is_dict(config)
    validate(config)

    logger.debug("Used config:")
    logger.debug(OmegaConf.to_yaml(config, resolve=True))

    return config


def to_canonical_yaml(config: DictConfig) -> str:
    public = OmegaConf.masked_copy(config, [key for key in config if key != "internal"])
    return OmegaConf.to_yaml(public, resolve=True, sort_keys=True)
