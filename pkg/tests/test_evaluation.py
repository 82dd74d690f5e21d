"""Tests for flow metrics, accumulation and colour rendering."""

import numpy as np
import pytest

from src.core.errors import DimensionMismatch, EmptyMask, InvalidArgument, LengthMismatch
from src.core.models import FlowField
from src.services.evaluation import (
    compose,
    compose_points,
    epe,
    f1_all,
    flow_to_color,
    metrics_report,
    trajectory_error,
)


def _random_flow(rng, size=(12, 16), scale=4.0):
    return FlowField(u=scale * rng.standard_normal(size), v=scale * rng.standard_normal(size))


class TestEpe:

    def test_identical(self):
        rng = np.random.default_rng(42)
        flow = _random_flow(rng)
        assert epe(flow, flow) == 0.0

    def test_constant_offset(self):
        assert epe(FlowField.constant(8, 8, 3.0, 4.0), FlowField.zeros(8, 8)) == pytest.approx(5.0)

    def test_mask_selects_pixels(self):
        flow = FlowField.zeros(4, 4)
        gt = FlowField.zeros(4, 4)
        gt.u[0, 0] = 2.0
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, :2] = True
        assert epe(flow, gt, mask) == pytest.approx(1.0)

    def test_empty_mask(self):
        with pytest.raises(EmptyMask):
            epe(FlowField.zeros(4, 4), FlowField.zeros(4, 4), np.zeros((4, 4), dtype=bool))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            epe(FlowField.zeros(4, 4), FlowField.zeros(5, 4))


class TestF1All:

    def test_matches_brute_force_count(self):
        rng = np.random.default_rng(42)
        flow, gt = _random_flow(rng), _random_flow(rng)
        outliers = 0
        for y in range(12):
            for x in range(16):
                err = np.hypot(flow.u[y, x] - gt.u[y, x], flow.v[y, x] - gt.v[y, x])
                mag = np.hypot(gt.u[y, x], gt.v[y, x])
                outliers += int(err > 3.0 and err > 0.05 * mag)
        assert f1_all(flow, gt) == pytest.approx(100.0 * outliers / (12 * 16))

    def test_small_errors_are_inliers(self):
        assert f1_all(FlowField.constant(8, 8, 2.5, 0.0), FlowField.zeros(8, 8)) == 0.0


class TestCompose:

    def test_constant_slices_add_up(self):
        flows = [FlowField.constant(32, 8, 0.5, 0.0) for _ in range(20)]
        total = compose(flows)
        np.testing.assert_allclose(total.u[:, :21], 10.0)
        np.testing.assert_allclose(total.v, 0.0)

    def test_single_slice(self):
        flow = FlowField.constant(4, 4, 1.0, -1.0)
        np.testing.assert_array_equal(compose([flow]).u, flow.u)

    def test_empty(self):
        with pytest.raises(InvalidArgument):
            compose([])

    def test_points_sum(self):
        increments = np.tile([0.5, -0.25], (4, 3, 1))
        np.testing.assert_allclose(compose_points(increments), np.tile([2.0, -1.0], (3, 1)))


class TestTrajectoryError:

    def test_offset(self):
        positions = np.zeros((2, 5, 2))
        assert trajectory_error(positions, positions + [3.0, 4.0]) == pytest.approx(5.0)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            trajectory_error(np.zeros((2, 5, 2)), np.zeros((2, 4, 2)))


class TestMetricsReport:

    def test_fields(self):
        report = metrics_report(FlowField.constant(8, 8, 3.0, 4.0), FlowField.zeros(8, 8),
                                positions=np.zeros((1, 3, 2)), gt_tracks=np.ones((1, 3, 2)))
        assert report.epe == pytest.approx(5.0)
        assert report.f1_all == 100.0
        assert report.tepe == pytest.approx(np.sqrt(2.0))
        assert report.n_valid == 64

    def test_without_tracks(self):
        report = metrics_report(FlowField.zeros(4, 4), FlowField.zeros(4, 4))
        assert report.tepe is None


class TestFlowToColor:

    def test_zero_flow_is_white(self):
        rgb = flow_to_color(FlowField.zeros(4, 3), 1.0)
        assert rgb.shape == (3, 4, 3) and rgb.dtype == np.uint8
        assert np.all(rgb == 255)

    def test_saturated_positive_u_is_red(self):
        rgb = flow_to_color(FlowField.constant(2, 2, 5.0, 0.0), 5.0)
        assert np.all(rgb == [255, 0, 0])

    def test_negative_u_is_cyan(self):
        rgb = flow_to_color(FlowField.constant(3, 2, -2.0, 0.0), 2.0).astype(int)
        assert np.all(np.abs(rgb - [0, 255, 255]) <= 4)

    def test_half_magnitude_is_pale(self):
        rgb = flow_to_color(FlowField.constant(2, 2, 1.0, 0.0), 2.0).astype(int)
        assert np.all(rgb[..., 0] == 255)
        assert np.all(np.abs(rgb[..., 1:] - 127) <= 2)

    def test_max_mag_positive(self):
        with pytest.raises(InvalidArgument):
            flow_to_color(FlowField.zeros(2, 2), 0.0)
