from importlib import metadata, resources
from pathlib import Path

from jinja2 import Environment, PackageLoader, select_autoescape

################################################################################

MIB = 2**20
GIB = 2**30

VERSION = metadata.version(__package__)
DEFAULT_CONFIG_LOCATION = Path("prescope.yml")
DEFAULT_OUTPUT_DIR = "results"

TRACE_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
TIMELINE_FORMAT_VERSION = 1
TICK_UNIT = "us"

# Significant digits used when writing floats, enough for a bit-exact round-trip
FLOAT_DIGITS = 17

DEFAULT_HIDDEN_DIM = 128
GROUP_EDGE_LAYERS = 4

# Logit margin that makes a followed expert the strict top-1 of its layer
FOLLOW_MARGIN = 1.0

# Gating reads hidden states through a subspace of this rank; the rest of the state is small isotropic noise
ROUTING_RANK = 8
OFF_SUBSPACE_SHARE = 0.1
# Standard deviation of gate logits for hidden states spread evenly over the subspace
GATE_LOGIT_SCALE = 1.5

PROBABILITY_CLAMP = 1e-7

ORACLE_MAX_EXPERTS = 8

################################################################################

# Values from the configurations of the evaluated models
MODEL_PRESETS: dict[str, dict[str, int]] = {
    "mixtral": {
        "num_layers": 32,
        "experts_per_layer": 8,
        "top_k": 2,
        "expert_bytes": 336 * MIB,
        "hidden_dim": DEFAULT_HIDDEN_DIM,
    },
    "qwen3": {
        "num_layers": 48,
        "experts_per_layer": 128,
        "top_k": 8,
        "expert_bytes": 9 * MIB,
        "hidden_dim": DEFAULT_HIDDEN_DIM,
    },
    "deepseek": {
        "num_layers": 26,
        "experts_per_layer": 64,
        "top_k": 6,
        "expert_bytes": 33 * MIB // 2,
        "hidden_dim": DEFAULT_HIDDEN_DIM,
    },
    "moonlight": {
        "num_layers": 26,
        "experts_per_layer": 64,
        "top_k": 6,
        "expert_bytes": 33 * MIB // 2,
        "hidden_dim": DEFAULT_HIDDEN_DIM,
    },
    # Desk-scale variants keep the expert shape and shrink depth (and width for qwen3)
    "mixtral-desk": {
        "num_layers": 12,
        "experts_per_layer": 8,
        "top_k": 2,
        "expert_bytes": 336 * MIB,
        "hidden_dim": DEFAULT_HIDDEN_DIM,
    },
    "qwen3-desk": {
        "num_layers": 12,
        "experts_per_layer": 32,
        "top_k": 2,
        "expert_bytes": 9 * MIB,
        "hidden_dim": DEFAULT_HIDDEN_DIM,
    },
    "deepseek-desk": {
        "num_layers": 10,
        "experts_per_layer": 64,
        "top_k": 6,
        "expert_bytes": 33 * MIB // 2,
        "hidden_dim": DEFAULT_HIDDEN_DIM,
    },
    "moonlight-desk": {
        "num_layers": 10,
        "experts_per_layer": 64,
        "top_k": 6,
        "expert_bytes": 33 * MIB // 2,
        "hidden_dim": DEFAULT_HIDDEN_DIM,
    },
}

################################################################################

ASSETS_RESOURCE = resources.files(__package__).joinpath("assets")
GOLDEN_RESOURCE = ASSETS_RESOURCE.joinpath("golden")

DEFAULT_JINJA2_ENVIRONMENT = Environment(
    loader=PackageLoader(__package__, "assets/templates"),
    autoescape=select_autoescape(),
    keep_trailing_newline=True,
)
DEFAULT_SUMMARY_TEMPLATE = DEFAULT_JINJA2_ENVIRONMENT.get_template("summary.md.jinja")
