#!/usr/bin/env python3
"""
Common Gradient Space Service
Expresses both modalities as a temporal brightness change over the frame
interval and compares them patch by patch.

Frame side:  I_t = -(grad I . U)
Event side:  I_t = C * sum of polarities, each event warped back along U
"""

import logging
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.core.errors import BadRange, BadWindow, DimensionMismatch, TooSmall
from src.core.models import (
    Distribution,
    EventStream,
    FlowField,
    GradientMap,
    GradientPair,
    Image,
)
from src.services import bilinear

logger = logging.getLogger(__name__)


def _require_same_shape(a: Tuple[int, ...], b: Tuple[int, ...], what: str) -> None:
    if tuple(a) != tuple(b):
        raise DimensionMismatch(f"{what}: {tuple(a)} vs {tuple(b)}")


def spatial_gradient(img: Image) -> GradientPair:
    """Central differences inside, one-sided differences on the border."""
    if img.width < 3 or img.height < 3:
        raise TooSmall(f"image must be at least 3x3, got {img.width}x{img.height}")
    iy, ix = np.gradient(img.data)
    return GradientPair(ix=ix, iy=iy)


def frame_temporal_gradient(img: Image, flow: FlowField) -> GradientMap:
    """-(ix*u + iy*v) with the flow in pixels over the window."""
    _require_same_shape(img.data.shape, flow.shape, "image and flow")
    grad = spatial_gradient(img)
    return GradientMap(data=-(grad.ix * flow.u + grad.iy * flow.v))


def event_temporal_gradient(slices: Sequence[EventStream], flow: FlowField, C: float) -> GradientMap:
    """
    Warp every event back to the reference instant and accumulate polarity.

    An event of slice k (of T) moves by -flow * (k + 0.5) / T, with the flow
    looked up at its pixel, and is splatted bilinearly.
    """
    height, width = flow.shape
    out = np.zeros((height, width), dtype=np.float64)
    T = len(slices)
    for k, stream in enumerate(slices):
        if (stream.height, stream.width) != (height, width):
            raise DimensionMismatch(f"slice {k} is {stream.width}x{stream.height}, flow is {width}x{height}")
        if len(stream) == 0:
            continue
        frac = (k + 0.5) / T
        xs = stream.x - flow.u[stream.y, stream.x] * frac
        ys = stream.y - flow.v[stream.y, stream.x] * frac
        out += bilinear.splat(stream.p.astype(np.float64), xs, ys, (height, width))
    return GradientMap(data=out * C)


def gradient_similarity(gf: np.ndarray, ge: np.ndarray, win: int, stride: int) -> np.ndarray:
    """
    Root-mean-square difference of every win x win patch.

    Patches start every `stride` pixels; the result is ordered row-major by
    patch position.
    """
    gf = np.asarray(getattr(gf, "data", gf), dtype=np.float64)
    ge = np.asarray(getattr(ge, "data", ge), dtype=np.float64)
    _require_same_shape(gf.shape, ge.shape, "gradient maps")
    if win < 1 or stride < 1 or win > min(gf.shape):
        raise BadWindow(f"window {win} / stride {stride} does not fit a {gf.shape[1]}x{gf.shape[0]} map")
    squared = (gf - ge) ** 2
    patches = np.lib.stride_tricks.sliding_window_view(squared, (win, win))[::stride, ::stride]
    return np.sqrt(patches.mean(axis=(-2, -1))).ravel()


def relative_similarity(a: np.ndarray, b: np.ndarray, win: int, stride: int) -> np.ndarray:
    """
    Scale-free patch distance |a - b|^2 / (|a|^2 + |b|^2), in [0, 2].

    On binary maps this is one minus the Dice overlap. Two empty patches are
    at distance 0. Patch order matches gradient_similarity.
    """
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    _require_same_shape(a.shape, b.shape, "maps")
    if win < 1 or stride < 1 or win > min(a.shape):
        raise BadWindow(f"window {win} / stride {stride} does not fit a {a.shape[1]}x{a.shape[0]} map")

    def _patch_sums(values: np.ndarray) -> np.ndarray:
        patches = np.lib.stride_tricks.sliding_window_view(values, (win, win))[::stride, ::stride]
        return patches.sum(axis=(-2, -1)).ravel()

    difference = _patch_sums((a - b) ** 2)
    energy = _patch_sums(a ** 2 + b ** 2)
    return np.where(energy > 0, difference / np.where(energy > 0, energy, 1.0), 0.0)


def smooth_gradient(g: GradientMap, sigma: float) -> GradientMap:
    """Gaussian-smoothed copy; sigma 0 returns the map unchanged."""
    if sigma < 0:
        raise BadRange(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return g
    return GradientMap(data=ndimage.gaussian_filter(g.data, sigma, mode="nearest"))


def patch_origins(shape: Tuple[int, int], win: int, stride: int) -> List[Tuple[int, int]]:
    """(y0, x0) of every patch, in the order gradient_similarity reports them."""
    height, width = shape
    return [(y0, x0) for y0 in range(0, height - win + 1, stride)
            for x0 in range(0, width - win + 1, stride)]


def make_distribution(values: Sequence[float], bins: int, value_range: Tuple[float, float]) -> Distribution:
    """
    Normalized histogram over equal-width bins.

    Values outside the range land in the edge bins. An empty input yields the
    uniform distribution.
    """
    lo, hi = value_range
    if bins < 1 or not lo < hi:
        raise BadRange(f"need bins >= 1 and lo < hi, got bins={bins}, range=({lo}, {hi})")
    edges = np.linspace(lo, hi, bins + 1)
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        return Distribution(edges=edges, mass=np.full(bins, 1.0 / bins))
    index = np.floor((values - lo) / (hi - lo) * bins)
    index = np.clip(index, 0, bins - 1).astype(np.int64)
    counts = np.bincount(index, minlength=bins).astype(np.float64)
    return Distribution(edges=edges, mass=counts / values.size)
