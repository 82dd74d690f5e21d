"""Shared fixtures for the flow toolkit tests."""

import numpy as np
import pytest
from scipy import ndimage

from src.core.models import Image, SceneSpec


def smooth_noise(size, seed=42, sigma=2.0, lo=0.1, hi=0.9):
    """Band-limited random texture rescaled to [lo, hi]."""
    rng = np.random.default_rng(seed)
    field = ndimage.gaussian_filter(rng.random(size), sigma)
    field = (field - field.min()) / (field.max() - field.min())
    return lo + (hi - lo) * field


@pytest.fixture
def noise_image():
    return Image(data=smooth_noise((32, 32)))


@pytest.fixture
def ramp_spec():
    """Undegraded ramp translated 2 px in +x: every pixel darkens by exactly 0.1."""
    return SceneSpec(width=16, height=12, texture="ramp", ramp_slope=0.05, ramp_offset=0.1,
                     motion="translation", motion_u=2.0, motion_v=0.0, T=5, C=0.05,
                     n_frames=3, substeps=50)
