import shutil
import tempfile
from collections.abc import Generator
from pathlib import Path

import pytest

from prescope.config import TraceGenConfig
from prescope.costmodel import CostParams
from prescope.workload import ModelSpec


@pytest.fixture(scope="module")
def setup_paths() -> Generator[tuple[Path, Path], None, None]:
    cwd = Path("tests").resolve(strict=True)
    output_path = Path(tempfile.mkdtemp(prefix="prescope_")).resolve(strict=False)

    yield cwd, output_path

    if output_path.exists():
        shutil.rmtree(output_path)


@pytest.fixture
def small_spec() -> ModelSpec:
    return ModelSpec(num_layers=6, experts_per_layer=8, top_k=2, expert_bytes=1024, hidden_dim=16)


@pytest.fixture
def trace_config() -> TraceGenConfig:
    return TraceGenConfig()


# Hand-checkable constants shared with the bundled golden scenarios
@pytest.fixture
def golden_params() -> CostParams:
    return CostParams(t_io=10, t_g=2, t_attn=4, beta=1.0, startup=0.0)
