import numpy as np
import pytest
import torch

from glancefocus.model import ModelBundle, ModelConfig
from glancefocus.synthdata import SynthConfig, generate_split


@pytest.fixture(scope="session")
def small_cfg():
    return SynthConfig(num_classes=4, frames=3, frame_size=32, glyph_size=6, num_distractors=2, max_step=2,
                       noise_std=0.05, seed=3)


@pytest.fixture(scope="session")
def small_split(small_cfg):
    return generate_split(small_cfg, 12, "test", 11)


@pytest.fixture
def small_bundle():
    cfg = ModelConfig(num_classes=4, frame_size=32, patch_size=16, grid_k=3, hidden=16)
    return ModelBundle(cfg, seed=5).eval()


@pytest.fixture
def skip_bundle():
    cfg = ModelConfig(num_classes=4, frame_size=32, patch_size=16, grid_k=3, hidden=16, skip_gate=True)
    return ModelBundle(cfg, seed=6).eval()


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
