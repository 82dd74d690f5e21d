"""Tests for boundary maps, distribution constraints and the reference template."""

import math

import numpy as np
import pytest
from scipy import ndimage

from src.core.errors import (
    BadProbability,
    BadThresholds,
    BinMismatch,
    EmptyTemplate,
    InvalidArgument,
)
from src.core.models import BoundaryMap, Distribution, EventStream, GradientMap, Image
from src.services.boundary import (
    boundary_patch_distances,
    boundary_probability,
    build_template,
    canny,
    classify_boundary,
    cross_entropy,
    gradient_boundary,
    iou,
    kl_divergence,
    project_events_boundary,
    soft_class_distribution,
)


def _step_image(width=32, height=32, column=16):
    data = np.full((height, width), 0.2)
    data[:, column:] = 0.8
    return Image(data=data)


def _dist(mass):
    mass = np.asarray(mass, dtype=np.float64)
    return Distribution(edges=np.linspace(0.0, 1.0, mass.size + 1), mass=mass)


class TestCanny:

    def test_vertical_step_gives_one_pixel_per_row(self):
        edges = canny(_step_image()).data
        rows, cols = np.nonzero(edges)
        assert np.array_equal(np.unique(rows), np.arange(32))
        # symmetric ridge resolves to the positive-side pixel
        assert np.all(cols == 16)

    def test_flat_image_has_no_boundary(self):
        assert canny(Image(data=np.full((16, 16), 0.5))).data.sum() == 0

    def test_threshold_order(self):
        with pytest.raises(BadThresholds):
            canny(_step_image(), lo=0.3, hi=0.3)

    def test_disk_gives_a_closed_ring_of_its_perimeter(self):
        radius = 14
        yy, xx = np.mgrid[0:64, 0:64]
        disk = np.where((xx - 31.5) ** 2 + (yy - 31.5) ** 2 <= radius ** 2, 0.2, 0.8)
        ring = canny(Image(data=disk)).data.astype(bool)
        _, n_parts = ndimage.label(ring, structure=np.ones((3, 3)))
        assert n_parts == 1
        assert ndimage.binary_fill_holes(ring).sum() > ring.sum()
        assert abs(ring.sum() - 2 * math.pi * radius) <= 0.15 * 2 * math.pi * radius


class TestEventBoundary:

    def test_projection_threshold(self):
        stream = EventStream(width=4, height=4, t_start=0.0, t_end=1.0,
                             t=np.array([0.1, 0.2, 0.3]), x=np.array([1, 1, 2]),
                             y=np.array([0, 0, 3]), p=np.array([1, -1, 1]))
        assert project_events_boundary(stream, 1).data.sum() == 2
        only_busy = project_events_boundary(stream, 2).data
        assert only_busy[0, 1] == 1 and only_busy.sum() == 1

    def test_n_min_positive(self):
        with pytest.raises(InvalidArgument):
            project_events_boundary(EventStream(width=2, height=2), 0)


class TestKlDivergence:

    def test_self_divergence_is_zero(self):
        p = _dist([0.1, 0.2, 0.3, 0.4])
        assert abs(kl_divergence(p, p)) < 1e-9

    def test_point_mass_against_uniform(self):
        assert kl_divergence(_dist([1.0, 0.0]), _dist([0.5, 0.5])) == pytest.approx(math.log(2), abs=1e-3)

    def test_bin_mismatch(self):
        with pytest.raises(BinMismatch):
            kl_divergence(_dist([0.5, 0.5]), _dist([0.2, 0.3, 0.5]))


class TestClassification:

    def test_classes(self):
        np.testing.assert_array_equal(classify_boundary([1.0, 0.0, 0.55, 0.95], 10), [0, 9, 4, 0])

    def test_bad_probability(self):
        with pytest.raises(BadProbability):
            classify_boundary([1.5], 10)

    def test_k_at_least_two(self):
        with pytest.raises(InvalidArgument):
            classify_boundary([0.5], 1)

    def test_soft_distribution_peaks_at_class(self):
        probs = np.array([1.0, 0.55, 0.05])
        dist = soft_class_distribution(probs, 10)
        np.testing.assert_allclose(dist.sum(axis=1), 1.0)
        np.testing.assert_array_equal(dist.argmax(axis=1), classify_boundary(probs, 10))


class TestCrossEntropy:

    def test_one_hot_correct_is_zero(self):
        pred = np.eye(4)
        assert abs(cross_entropy(pred, np.arange(4))) < 1e-7

    def test_uniform_prediction(self):
        pred = np.full((3, 4), 0.25)
        assert cross_entropy(pred, [0, 1, 3]) == pytest.approx(math.log(4))

    def test_label_out_of_range(self):
        with pytest.raises(BinMismatch):
            cross_entropy(np.eye(3), [0, 1, 3])


class TestCommonSpaceBoundaries:

    def test_threshold_on_magnitude(self):
        g = GradientMap(data=np.array([[0.1, -0.3], [0.2, 0.0]]))
        np.testing.assert_array_equal(gradient_boundary(g, 0.2).data, [[0, 1], [1, 0]])

    def test_negative_threshold(self):
        with pytest.raises(InvalidArgument):
            gradient_boundary(GradientMap(data=np.zeros((2, 2))), -0.1)

    def test_patch_distance_is_one_minus_dice(self):
        a = np.zeros((8, 8), dtype=np.uint8)
        b = np.zeros((8, 8), dtype=np.uint8)
        a[:, 3] = 1
        b[:, 3:5] = 1
        d = boundary_patch_distances(BoundaryMap(data=a), BoundaryMap(data=b), 8, 8)
        np.testing.assert_allclose(d, 1.0 - 2 * 8 / 24)

    def test_disjoint_boundaries_are_one_apart(self):
        a = np.zeros((8, 8), dtype=np.uint8)
        b = np.zeros((8, 8), dtype=np.uint8)
        a[:, 1] = 1
        b[:, 6] = 1
        np.testing.assert_allclose(boundary_patch_distances(BoundaryMap(data=a), BoundaryMap(data=b), 8, 8), 1.0)


class TestBoundaryProbability:

    def test_identical_maps_are_fully_reliable(self):
        data = np.zeros((16, 16), dtype=np.uint8)
        data[:, 8] = 1
        bf = BoundaryMap(data=data)
        prob = boundary_probability(bf, bf, 8, 4)
        np.testing.assert_allclose(prob[:, 8], 1.0)
        assert np.all(prob[:, :8] == 0.0)

    def test_gradient_maps_drive_the_distance(self):
        data = np.zeros((16, 16), dtype=np.uint8)
        data[4, :] = 1
        bf = BoundaryMap(data=data)
        be = BoundaryMap(data=np.zeros((16, 16), dtype=np.uint8))
        g = np.full((16, 16), 0.3)
        # binary maps disagree, but equal gradient maps make every patch identical
        prob = boundary_probability(bf, be, 8, 8, gf=g, ge=g)
        np.testing.assert_allclose(prob[4, :], 1.0)
        assert boundary_probability(bf, be, 8, 8)[4, :].max() < 1.0

    def test_needs_both_gradient_maps(self):
        bf = BoundaryMap(data=np.zeros((8, 8), dtype=np.uint8))
        with pytest.raises(InvalidArgument):
            boundary_probability(bf, bf, 4, 4, gf=np.zeros((8, 8)))


class TestBuildTemplate:

    def test_threshold_and_order(self):
        data = np.zeros((8, 8), dtype=np.uint8)
        data[2, 1] = data[5, 3] = data[6, 6] = 1
        bmap = BoundaryMap(data=data)
        prob = np.zeros((8, 8))
        prob[2, 1], prob[5, 3], prob[6, 6] = 0.85, 0.2, 0.65
        tmpl = build_template(bmap, bmap, prob, 0.5, 10)
        assert [(pt.x, pt.y) for pt in tmpl.points] == [(1, 2), (6, 6)]
        assert [pt.boundary_class for pt in tmpl.points] == [1, 3]

    def test_empty(self):
        bmap = BoundaryMap(data=np.zeros((8, 8), dtype=np.uint8))
        with pytest.raises(EmptyTemplate):
            build_template(bmap, bmap, np.zeros((8, 8)), 0.5)


class TestIou:

    def test_values(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, :2] = 1
        b[0, 1:3] = 1
        assert iou(BoundaryMap(data=a), BoundaryMap(data=b)) == pytest.approx(1 / 3)
        assert iou(BoundaryMap(data=a), BoundaryMap(data=a)) == 1.0
        empty = BoundaryMap(data=np.zeros((4, 4), dtype=np.uint8))
        assert iou(empty, empty) == 1.0
