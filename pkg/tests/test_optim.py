"""Tests for the photometric objective, gradient check, total loss and refinement."""

import numpy as np
import pytest

from src.core.errors import BadExponent, DimensionMismatch, InvalidArgument, NonFinite
from src.core.models import FlowField, Image
from src.services.evaluation import epe
from src.services.optim import (
    gradcheck,
    photometric_grad,
    photometric_loss,
    random_gradcheck_instance,
    refine_flow,
    sparse_lp,
    total_loss,
)


def _ramps(size=32):
    x = np.arange(size, dtype=np.float64)
    i0 = Image(data=np.tile(0.1 + 0.02 * x, (size, 1)))
    i1 = Image(data=np.tile(0.08 + 0.02 * x, (size, 1)))    # i0 shifted by one pixel
    return i0, i1


class TestSparseLp:

    def test_zero_residual(self):
        assert sparse_lp(0.0, 0.4, 1e-3) == pytest.approx(1e-3 ** 0.4)

    def test_even_and_increasing(self):
        x = np.linspace(0.0, 2.0, 21)
        values = sparse_lp(x)
        np.testing.assert_allclose(sparse_lp(-x), values)
        assert np.all(np.diff(values) > 0)

    def test_exponent_range(self):
        with pytest.raises(BadExponent):
            sparse_lp(0.5, p=1.5)
        with pytest.raises(BadExponent):
            sparse_lp(0.5, p=0.0)


class TestPhotometric:

    def test_exact_warp_leaves_only_the_floor(self):
        i0, i1 = _ramps()
        flow = FlowField.constant(32, 32, 1.0, 0.0)
        # the last column samples past the border and is excluded
        assert photometric_loss(i0, i1, flow) == pytest.approx(32 * 31 * 1e-3 ** 0.4)

    def test_ground_truth_term(self):
        i0, i1 = _ramps()
        flow = FlowField.constant(32, 32, 1.0, 0.0)
        gt = FlowField.constant(32, 32, 1.5, 0.25)
        extra = photometric_loss(i0, i1, flow, gt=gt) - photometric_loss(i0, i1, flow)
        assert extra == pytest.approx(0.75)

    def test_gradient_points_downhill(self):
        i0, i1 = _ramps()
        grad = photometric_grad(i0, i1, FlowField.constant(32, 32, 1.3, 0.0))
        assert np.all(grad.u[:, :30] > 0)
        np.testing.assert_allclose(grad.v[:31, :30], 0.0, atol=1e-12)

    def test_shape_mismatch(self):
        i0, i1 = _ramps()
        with pytest.raises(DimensionMismatch):
            photometric_loss(i0, i1, FlowField.zeros(8, 8))


class TestGradcheck:

    @pytest.mark.parametrize("seed", range(10))
    def test_analytic_matches_numeric(self, seed):
        i0, i1, flow = random_gradcheck_instance(seed)
        assert gradcheck(i0, i1, flow) < 1e-4

    def test_step_positive(self):
        i0, i1, flow = random_gradcheck_instance(0)
        with pytest.raises(InvalidArgument):
            gradcheck(i0, i1, flow, h=0.0)


class TestTotalLoss:

    def test_weighted_sum(self):
        report = total_loss(pho=1.0, kl=2.0, entropy=3.0, spa=4.0, temp=5.0, consis=6.0)
        assert report.total == pytest.approx(1.0 + 0.2 + 0.3 + 4.0 + 5.0 + 3.0)
        assert report.lambdas == (0.1, 0.1, 1.0, 1.0, 0.5)

    def test_custom_weights(self):
        report = total_loss(pho=1.0, spa=2.0, lambdas=(0, 0, 0, 0, 0))
        assert report.total == 1.0

    def test_non_finite(self):
        with pytest.raises(NonFinite):
            total_loss(pho=float("nan"))

    def test_weight_count(self):
        with pytest.raises(InvalidArgument):
            total_loss(lambdas=(1.0, 1.0))


class TestRefineFlow:

    def test_converges_on_shifted_ramp(self):
        i0, i1 = _ramps()
        result = refine_flow(i0, i1, FlowField.constant(32, 32, 1.3, 0.0), steps=50)
        interior = np.zeros((32, 32), dtype=bool)
        interior[:31, :28] = True
        assert epe(result.flow, FlowField.constant(32, 32, 1.0, 0.0), interior) < 0.1
        assert np.all(np.diff(result.loss_history) <= 0)

    def test_zero_steps_returns_start(self):
        i0, i1 = _ramps()
        start = FlowField.constant(32, 32, 1.3, 0.0)
        result = refine_flow(i0, i1, start, steps=0)
        np.testing.assert_array_equal(result.flow.u, start.u)
        assert len(result.loss_history) == 1

    def test_invalid_step_size(self):
        i0, i1 = _ramps()
        with pytest.raises(InvalidArgument):
            refine_flow(i0, i1, FlowField.zeros(32, 32), lr=0.0)
