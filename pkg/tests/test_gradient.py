"""Tests for the frame-side and event-side temporal gradients and patch histograms."""

import numpy as np
import pytest

from src.core.errors import BadRange, BadWindow, DimensionMismatch, TooSmall
from src.core.models import FlowField, GradientMap, Image, SceneSpec
from src.services import synth
from src.services.gradient import (
    event_temporal_gradient,
    frame_temporal_gradient,
    gradient_similarity,
    make_distribution,
    patch_origins,
    relative_similarity,
    smooth_gradient,
    spatial_gradient,
)


def _ramp(width=16, height=12, slope=0.05, offset=0.1):
    return Image(data=np.tile(offset + slope * np.arange(width, dtype=np.float64), (height, 1)))


class TestSpatialGradient:

    def test_ramp(self):
        grad = spatial_gradient(_ramp())
        np.testing.assert_allclose(grad.ix, 0.05)
        np.testing.assert_allclose(grad.iy, 0.0)

    def test_too_small(self):
        with pytest.raises(TooSmall):
            spatial_gradient(Image(data=np.zeros((2, 2))))


class TestTemporalGradients:

    def test_frame_side_on_ramp(self):
        flow = FlowField.constant(16, 12, 2.0, 0.0)
        np.testing.assert_allclose(frame_temporal_gradient(_ramp(), flow).data, -0.1)

    def test_frame_side_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            frame_temporal_gradient(_ramp(), FlowField.zeros(8, 8))

    def test_event_side_matches_frame_side(self, ramp_spec):
        bundle = synth.gen_scene(ramp_spec)
        flow = bundle.gt_flow_total
        gf = frame_temporal_gradient(bundle.frames.frames[0], flow).data
        ge = event_temporal_gradient(bundle.slices, flow, ramp_spec.C).data
        # the rightmost columns lose events warped in from outside the sensor
        interior = np.abs(gf - ge)[:, :ramp_spec.width - 3]
        assert interior.mean() <= 2 * ramp_spec.C
        np.testing.assert_allclose(ge[:, :ramp_spec.width - 3], -0.1, atol=1e-9)

    def test_event_side_tracks_frame_side_on_noise(self):
        spec = SceneSpec(width=64, height=64, texture="noise", motion_u=3.0, motion_v=0.0, C=0.05)
        bundle = synth.gen_scene(spec)
        frame = bundle.frames.frames[0]
        gf = frame_temporal_gradient(frame, bundle.gt_flow_total).data
        ge = event_temporal_gradient(bundle.slices, bundle.gt_flow_total, spec.C).data
        grad = spatial_gradient(frame)
        textured = np.hypot(grad.ix, grad.iy) > 0.01
        assert textured.any()
        assert np.abs(gf - ge)[textured].mean() <= 2 * spec.C

    def test_no_events_gives_zero(self, ramp_spec):
        spec = ramp_spec.model_copy(update={"texture": "flat"})
        bundle = synth.gen_scene(spec)
        assert len(bundle.stream) == 0
        ge = event_temporal_gradient(bundle.slices, bundle.gt_flow_total, spec.C)
        assert np.all(ge.data == 0.0)


class TestGradientSimilarity:

    def test_identical_maps(self):
        rng = np.random.default_rng(42)
        g = rng.standard_normal((20, 24))
        d = gradient_similarity(g, g, 8, 4)
        assert d.shape == (len(patch_origins((20, 24), 8, 4)),)
        assert np.all(d == 0.0)

    def test_constant_offset_is_rms(self):
        rng = np.random.default_rng(42)
        g = rng.standard_normal((16, 16))
        np.testing.assert_allclose(gradient_similarity(g, g + 0.25, 4, 4), 0.25)

    def test_patch_count(self):
        assert len(patch_origins((20, 24), 8, 4)) == 4 * 5

    def test_window_too_large(self):
        with pytest.raises(BadWindow):
            gradient_similarity(np.zeros((8, 8)), np.zeros((8, 8)), 9, 1)


class TestRelativeSimilarity:

    def test_scale_free(self):
        rng = np.random.default_rng(42)
        g = rng.standard_normal((16, 16))
        np.testing.assert_allclose(relative_similarity(g, 0.5 * g, 8, 8), 0.25 / 1.25)
        np.testing.assert_allclose(relative_similarity(10 * g, 5 * g, 8, 8), 0.25 / 1.25)

    def test_binary_maps_give_one_minus_dice(self):
        a = np.zeros((8, 8))
        b = np.zeros((8, 8))
        a[:, :4] = 1.0
        b[:, 2:6] = 1.0
        # overlap 16, sizes 32 and 32
        np.testing.assert_allclose(relative_similarity(a, b, 8, 8), 1.0 - 2 * 16 / 64)

    def test_empty_patches_agree(self):
        assert np.all(relative_similarity(np.zeros((8, 8)), np.zeros((8, 8)), 4, 4) == 0.0)

    def test_opposite_signs_are_farthest(self):
        g = np.ones((8, 8))
        np.testing.assert_allclose(relative_similarity(g, -g, 4, 4), 2.0)


class TestSmoothGradient:

    def test_zero_sigma_is_identity(self):
        g = GradientMap(data=np.arange(16.0).reshape(4, 4))
        assert smooth_gradient(g, 0.0) is g

    def test_constant_map_is_unchanged(self):
        np.testing.assert_allclose(smooth_gradient(GradientMap(data=np.full((8, 8), 0.3)), 1.0).data, 0.3)

    def test_negative_sigma(self):
        with pytest.raises(BadRange):
            smooth_gradient(GradientMap(data=np.zeros((4, 4))), -1.0)


class TestMakeDistribution:

    def test_normalized_with_edge_bins(self):
        dist = make_distribution([-1.0, 0.05, 0.3, 0.7, 2.0], 4, (0.0, 0.8))
        np.testing.assert_allclose(dist.mass, [0.4, 0.2, 0.0, 0.4])
        assert dist.mass.sum() == pytest.approx(1.0)
        assert dist.edges.shape == (5,)

    def test_empty_is_uniform(self):
        np.testing.assert_allclose(make_distribution([], 5, (0.0, 1.0)).mass, 0.2)

    def test_bad_range(self):
        with pytest.raises(BadRange):
            make_distribution([0.1], 4, (1.0, 1.0))
