from __future__ import annotations

import sys
from pathlib import Path
from typing import List

import pytest

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

from app.model import PyramidConfig  # noqa: E402
from app.synth_data import TrainingPair, generate_dataset  # noqa: E402


def make_tiny_config(levels: int = 2, resolution: int = 16, **overrides: object) -> PyramidConfig:
    """Narrow decoders so forward/backward stay fast in tests."""
    defaults = dict(
        decoder_channels=((8, 8),) * levels,
        dilations_per_level=((1, 2),) * levels,
        matchability_channels=(4, 1),
    )
    defaults.update(overrides)
    return PyramidConfig.for_levels(levels, resolution, **defaults)


@pytest.fixture()
def tiny_config() -> PyramidConfig:
    return make_tiny_config()


@pytest.fixture(scope="session")
def affine_pairs() -> List[TrainingPair]:
    return generate_dataset(8, ["affine"], seed=0, strength=0.2, resolution=16, val_fraction=0.25)
