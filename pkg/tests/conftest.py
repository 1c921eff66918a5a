import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from uniddg.networks import ModelConfig  # noqa: E402

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(
        unet_widths=(2, 4, 8, 16, 32),
        content_channels=2,
        style_widths=(4, 8),
        style_dim=4,
        decoder_width=4,
        mlp_hidden=8,
        seg_width=4,
        num_classes=3,
    )


@pytest.fixture
def small_cfg():
    """Narrow but structurally complete model for fast CPU training tests."""
    return ModelConfig(
        unet_widths=(4, 8, 8, 16, 16),
        content_channels=4,
        style_widths=(8, 8, 16),
        style_dim=8,
        decoder_width=8,
        mlp_hidden=16,
        seg_width=8,
        num_classes=3,
    )


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
