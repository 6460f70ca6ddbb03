"""Shared fixtures: small pyramids, seeded weights and seeded frame streams."""

import numpy as np
import pytest

from shift_memory_segmentation.pyramid_model import init_weights, validate_spec
from shift_memory_segmentation.tensor_core import FeatureMap


def _spec(mode="line", levels=2, width=8, height=0, **extra):
    return validate_spec(
        {"mode": mode, "levels": levels, "width": width, "height": height, **extra}
    )


def _frames(spec, count, seed=0):
    rng = np.random.default_rng(seed)
    shape = (spec.in_channels,) + spec.frame_dims
    return [FeatureMap(rng.random(shape, dtype=np.float32)) for _ in range(count)]


@pytest.fixture
def make_spec():
    """Factory: validated PyramidSpec from keyword fields."""
    return _spec


@pytest.fixture
def make_frames():
    """Factory: `count` uniform [0, 1) frames fitting a spec."""
    return _frames


@pytest.fixture
def line_spec():
    return _spec("line", 3, 16, channels=[4, 6, 8], num_classes=3)


@pytest.fixture
def line_weights(line_spec):
    return init_weights(line_spec, seed=11)


@pytest.fixture
def video_spec():
    return _spec("video", 2, 8, 8, in_channels=2, channels=[3, 5], num_classes=4)


@pytest.fixture
def video_weights(video_spec):
    return init_weights(video_spec, seed=5)
