import numpy as np
import pytest
import torch

from plgf.data import generate_synthetic
from plgf.flow import GridRelation
from plgf.model import ModelConfig

ACCEPTANCE_LINES: list[str] = []


def tiny_config(**kw) -> ModelConfig:
    base = dict(base_channels=8, stages=2, rdb_layers=2, rdb_growth=4, fpn_scales=2, attn_heads=2, cond_dim=8)
    base.update(kw)
    return ModelConfig(**base)


def random_factors(n, generator=None):
    g = generator or torch.Generator().manual_seed(0)
    cat = torch.stack([
        torch.randint(0, 7, (n,), generator=g),
        torch.randint(0, 24, (n,), generator=g),
        torch.randint(0, 16, (n,), generator=g),
    ], dim=1)
    cont = torch.stack([
        torch.rand(n, generator=g) * 65.6 - 24.6,
        torch.rand(n, generator=g) * 48.6,
        torch.randint(0, 2, (n,), generator=g).float(),
        torch.randint(0, 2, (n,), generator=g).float(),
    ], dim=1)
    return cat, cont


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """60 synthetic samples, 8x8 -> 32x32."""
    path = tmp_path_factory.mktemp("synth") / "ds"
    generate_synthetic(path, seed=3, count=60, relation=GridRelation(4, (8, 8)))
    return path


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
