#!/usr/bin/env python3
"""
Correlation Service
Hand-crafted per-pixel features, bilinear warping, correlation volumes and
template sampling.

Features per pixel: local-contrast intensity plus an (ix, iy) pair for each
Gaussian pyramid level, L2-normalized, so every correlation lies in [-1, 1].
"""

import logging
from typing import List, Tuple, TypeVar

import numpy as np
from scipy import ndimage

from src.core.errors import DimensionMismatch, InvalidArgument, OutOfBounds, TooSmall
from src.core.models import (
    BoundaryTemplate,
    CorrelationVolume,
    EventStream,
    FeatureMap,
    FlowField,
    Image,
    TemplatePoint,
)
from src.services import bilinear
from src.services.event_io import event_counts

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-8
LOCAL_MEAN_SIGMA = 2.0

Warpable = TypeVar("Warpable", FeatureMap, Image)


def extract_features(img: Image, levels: int = 2) -> FeatureMap:
    """
    Build a (1 + 2*levels, H, W) feature map.

    Level l gradients come from the image smoothed and decimated l times and
    are brought back to full resolution by bilinear interpolation.
    """
    if levels < 1:
        raise InvalidArgument(f"levels must be >= 1, got {levels}")
    if img.width < 3 or img.height < 3:
        raise TooSmall(f"image must be at least 3x3, got {img.width}x{img.height}")

    data = img.data
    height, width = data.shape
    channels = [data - ndimage.gaussian_filter(data, LOCAL_MEAN_SIGMA, mode="nearest")]

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    level = data
    for l in range(levels):
        if l > 0:
            level = ndimage.gaussian_filter(level, 1.0, mode="nearest")[::2, ::2]
        if min(level.shape) < 2:
            raise TooSmall(f"image too small for {levels} pyramid levels")
        gy, gx = np.gradient(level)
        scale = float(2 ** l)
        coords = np.stack([ys / scale, xs / scale])
        channels.append(ndimage.map_coordinates(gx, coords, order=1, mode="nearest"))
        channels.append(ndimage.map_coordinates(gy, coords, order=1, mode="nearest"))

    stacked = np.stack(channels)
    norm = np.sqrt(np.sum(stacked ** 2, axis=0))
    safe = np.where(norm < NORM_FLOOR, 1.0, norm)
    normalized = np.where(norm < NORM_FLOOR, 0.0, stacked / safe)
    return FeatureMap(data=normalized)


def warp(source: Warpable, flow: FlowField) -> Warpable:
    """out(x) = bilinear sample of source at x + flow(x); zero outside the raster."""
    arr = source.data
    if arr.shape[-2:] != flow.shape:
        raise DimensionMismatch(f"raster {arr.shape[-2:]} vs flow {flow.shape}")
    xs, ys = bilinear.pixel_grid(*flow.shape)
    warped = bilinear.sample(arr, xs + flow.u, ys + flow.v)
    if isinstance(source, Image):
        return Image(data=np.clip(warped, 0.0, 1.0), t=source.t)
    return FeatureMap(data=warped)


def build_correlation(f1: FeatureMap, f2: FeatureMap, flow: FlowField, radius: int = 4) -> CorrelationVolume:
    """
    value(x, d) = <f1(x), warp(f2, flow)(x + d)> for every d in the window.

    Displacements that leave the raster correlate with zero.
    """
    if radius < 1:
        raise InvalidArgument(f"radius must be >= 1, got {radius}")
    if f1.data.shape != f2.data.shape:
        raise DimensionMismatch(f"features {f1.data.shape} vs {f2.data.shape}")
    warped = warp(f2, flow).data
    channels, height, width = warped.shape
    padded = np.pad(warped, ((0, 0), (radius, radius), (radius, radius)))

    side = 2 * radius + 1
    volume = np.empty((height, width, side * side), dtype=np.float64)
    index = 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = padded[:, radius + dy:radius + dy + height, radius + dx:radius + dx + width]
            volume[:, :, index] = np.einsum("chw,chw->hw", f1.data, shifted)
            index += 1
    return CorrelationVolume(data=volume, radius=radius)


def sample_template(cv: CorrelationVolume, tmpl: BoundaryTemplate) -> List[Tuple[TemplatePoint, np.ndarray]]:
    """The correlation window of every template point, in template order."""
    out = []
    for point in tmpl.points:
        if not (0 <= point.x < cv.width and 0 <= point.y < cv.height):
            raise OutOfBounds(point.x, point.y)
        out.append((point, cv.data[point.y, point.x].copy()))
    return out


def displacement_priority(radius: int) -> np.ndarray:
    """Window indices ordered by |d|, then row-major; used to break argmax ties."""
    side = 2 * radius + 1
    dy, dx = np.divmod(np.arange(side * side), side)
    norm2 = (dx - radius) ** 2 + (dy - radius) ** 2
    return np.lexsort((np.arange(side * side), norm2))


def window_argmax(windows: np.ndarray, radius: int) -> np.ndarray:
    """Argmax over the last axis; ties go to the smallest displacement."""
    order = displacement_priority(radius)
    return order[np.argmax(windows[..., order], axis=-1)]


def peak_fraction(cv: CorrelationVolume, level: float = 0.5) -> float:
    """Share of pixels whose window peak exceeds `level`."""
    return float(np.mean(cv.data.max(axis=-1) > level))


def event_signal_features(stream: EventStream, sigma: float = 1.0) -> FeatureMap:
    """One-channel map of Gaussian-smoothed unsigned event counts, scaled to peak 1."""
    counts = ndimage.gaussian_filter(event_counts(stream).astype(np.float64), sigma, mode="nearest")
    peak = float(counts.max())
    return FeatureMap(data=(counts / peak if peak > 0 else counts)[None])


def blend_features(f0: FeatureMap, f1: FeatureMap, weight: float) -> FeatureMap:
    """(1 - weight) * f0 + weight * f1."""
    if f0.data.shape != f1.data.shape:
        raise DimensionMismatch(f"features {f0.data.shape} vs {f1.data.shape}")
    if not 0 <= weight <= 1:
        raise InvalidArgument(f"weight must lie in [0, 1], got {weight}")
    return FeatureMap(data=(1.0 - weight) * f0.data + weight * f1.data)
