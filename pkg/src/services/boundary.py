#!/usr/bin/env python3
"""
Boundary Template Service
Frame/event boundary maps, patch similarity distributions, the KL and
cross-entropy constraints, and the filtered reference template.
"""

import logging

import numpy as np
from scipy import ndimage

from src.core.errors import (
    BadProbability,
    BadThresholds,
    BinMismatch,
    DimensionMismatch,
    EmptyTemplate,
    InvalidArgument,
)
from src.core.models import (
    BoundaryMap,
    BoundaryTemplate,
    Distribution,
    EventStream,
    GradientMap,
    Image,
    TemplatePoint,
)
from src.services.event_io import event_counts
from src.services.gradient import gradient_similarity, patch_origins, relative_similarity

logger = logging.getLogger(__name__)

KL_EPS = 1e-8
CE_EPS = 1e-8

# (negative-side neighbour, positive-side neighbour) offsets as (dy, dx)
_NMS_NEIGHBOURS = {
    0: ((0, -1), (0, 1)),      # gradient along x
    45: ((-1, -1), (1, 1)),
    90: ((-1, 0), (1, 0)),     # gradient along y
    135: ((-1, 1), (1, -1)),
}


def _shifted(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """arr[y + dy, x + dx], zero outside."""
    padded = np.pad(arr, 1)
    h, w = arr.shape
    return padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]


def canny(img: Image, sigma: float = 1.4, lo: float = 0.1, hi: float = 0.3) -> BoundaryMap:
    """
    Canny edge detector with thresholds as fractions of the peak gradient.

    Gaussian smoothing, Sobel gradients, non-maximum suppression over four
    quantized directions, then hysteresis: weak pixels survive only when
    8-connected to a strong one.
    """
    if not (0 < lo < hi <= 1):
        raise BadThresholds(f"need 0 < lo < hi <= 1, got lo={lo}, hi={hi}")

    smoothed = ndimage.gaussian_filter(img.data, sigma)
    gx = ndimage.sobel(smoothed, axis=1)
    gy = ndimage.sobel(smoothed, axis=0)
    magnitude = np.hypot(gx, gy)
    peak = float(magnitude.max())
    if peak <= 1e-12:
        return BoundaryMap(data=np.zeros(img.data.shape, dtype=np.uint8))

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.round(angle / 45.0).astype(np.int64) % 4) * 45
    tol = 1e-9 * peak

    suppressed = np.zeros_like(magnitude)
    for direction, ((ny, nx), (py, px)) in _NMS_NEIGHBOURS.items():
        in_sector = sector == direction
        keep = (in_sector
                & (magnitude >= _shifted(magnitude, ny, nx) - tol)
                & (magnitude > _shifted(magnitude, py, px) + tol))
        suppressed[keep] = magnitude[keep]

    strong = suppressed >= hi * peak
    weak = suppressed >= lo * peak
    labels, count = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    connected = np.zeros(count + 1, dtype=bool)
    connected[np.unique(labels[strong])] = True
    connected[0] = False
    edges = connected[labels]

    logger.debug(f"Canny: {int(edges.sum())} boundary pixels (peak gradient {peak:.4f})")
    return BoundaryMap(data=edges.astype(np.uint8))


def project_events_boundary(stream: EventStream, n_min: int = 1) -> BoundaryMap:
    """Pixels that saw at least n_min events in the window."""
    if n_min < 1:
        raise InvalidArgument(f"n_min must be >= 1, got {n_min}")
    return BoundaryMap(data=(event_counts(stream) >= n_min).astype(np.uint8))


def boundary_patch_distances(bf: BoundaryMap, be: BoundaryMap, win: int, stride: int) -> np.ndarray:
    """One minus the Dice overlap of every patch; 0 where neither map has a boundary."""
    return relative_similarity(bf.data, be.data, win, stride)


def gradient_boundary(g: GradientMap, threshold: float) -> BoundaryMap:
    """Pixels whose temporal-gradient magnitude reaches threshold."""
    if threshold < 0:
        raise InvalidArgument(f"threshold must be >= 0, got {threshold}")
    return BoundaryMap(data=(np.abs(g.data) >= threshold).astype(np.uint8))


def _smoothed(mass: np.ndarray) -> np.ndarray:
    mass = mass + KL_EPS
    return mass / mass.sum()


def kl_divergence(p: Distribution, p0: Distribution) -> float:
    """sum p * log(p / p0) after epsilon smoothing of both distributions."""
    if p.bins != p0.bins:
        raise BinMismatch(f"{p.bins} bins vs {p0.bins} bins")
    ps, qs = _smoothed(p.mass), _smoothed(p0.mass)
    return float(np.sum(ps * np.log(ps / qs)))


def classify_boundary(prob: np.ndarray, K: int) -> np.ndarray:
    """Class 0 = normal boundary (probability 1), K-1 = most degraded."""
    prob = np.asarray(prob, dtype=np.float64)
    if K < 2:
        raise InvalidArgument(f"K must be >= 2, got {K}")
    if np.any(~np.isfinite(prob)) or np.any(prob < 0) or np.any(prob > 1):
        raise BadProbability("probabilities must lie in [0, 1]")
    return np.minimum(np.floor((1.0 - prob) * K), K - 1).astype(np.int64)


def soft_class_distribution(prob: np.ndarray, K: int, width: float = 1.0) -> np.ndarray:
    """(N, K) class distribution: a Gaussian bump around the continuous class (1 - prob) * K."""
    prob = np.asarray(prob, dtype=np.float64).ravel()
    centers = np.arange(K) + 0.5
    logits = -0.5 * ((centers[None, :] - ((1.0 - prob) * K)[:, None]) / width) ** 2
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=1, keepdims=True)


def cross_entropy(pred: np.ndarray, labels: np.ndarray) -> float:
    """Mean of -log(pred[label]) with an epsilon floor inside the log."""
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if pred.ndim != 2 or pred.shape[0] != labels.shape[0]:
        raise BinMismatch(f"predictions {pred.shape} do not match {labels.shape[0]} labels")
    K = pred.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise BinMismatch(f"labels must lie in [0, {K - 1}]")
    if labels.size == 0:
        return 0.0
    picked = pred[np.arange(labels.size), labels]
    return float(np.mean(-np.log(np.maximum(picked, CE_EPS))))


def boundary_probability(bf: BoundaryMap, be: BoundaryMap, win: int, stride: int,
                         tau: float = 0.1, gf=None, ge=None) -> np.ndarray:
    """
    Per-pixel boundary probability exp(-d / tau) from the local patch distance.

    d is measured between the temporal-gradient maps gf/ge when given,
    otherwise between the boundary maps. A pixel inside several patches gets
    their mean; only pixels on the union of the two boundary maps carry a
    probability, everything else is 0.
    """
    if tau <= 0:
        raise InvalidArgument(f"tau must be > 0, got {tau}")
    if (gf is None) != (ge is None):
        raise InvalidArgument("pass both gradient maps or neither")
    if gf is not None:
        distances = gradient_similarity(gf, ge, win, stride)
        if np.asarray(getattr(gf, "data", gf)).shape != bf.data.shape:
            raise DimensionMismatch("gradient maps and boundary maps differ in size")
    else:
        distances = boundary_patch_distances(bf, be, win, stride)
    total = np.zeros(bf.data.shape, dtype=np.float64)
    cover = np.zeros(bf.data.shape, dtype=np.float64)
    for (y0, x0), d in zip(patch_origins(bf.data.shape, win, stride), distances):
        total[y0:y0 + win, x0:x0 + win] += np.exp(-d / tau)
        cover[y0:y0 + win, x0:x0 + win] += 1.0
    prob = np.divide(total, cover, out=np.zeros_like(total), where=cover > 0)
    union = (bf.data | be.data).astype(bool)
    return np.where(union, prob, 0.0)


def build_template(bf: BoundaryMap, be: BoundaryMap, prob_map: np.ndarray,
                   threshold: float = 0.5, K: int = 10) -> BoundaryTemplate:
    """Boundary-union pixels with probability >= threshold, row-major."""
    if not 0 < threshold < 1:
        raise InvalidArgument(f"threshold must lie in (0, 1), got {threshold}")
    prob_map = np.asarray(prob_map, dtype=np.float64)
    if bf.data.shape != be.data.shape or prob_map.shape != bf.data.shape:
        raise DimensionMismatch("boundary maps and probability map differ in size")

    union = (bf.data | be.data).astype(bool)
    ys, xs = np.nonzero(union & (prob_map >= threshold))
    if ys.size == 0:
        raise EmptyTemplate(f"no boundary point reaches probability {threshold}")

    probs = prob_map[ys, xs]
    classes = classify_boundary(probs, K)
    points = [TemplatePoint(x=int(x), y=int(y), probability=float(pr), boundary_class=int(c))
              for x, y, pr, c in zip(xs, ys, probs, classes)]
    logger.info(f"Template: {len(points)} of {int(union.sum())} boundary pixels kept")
    return BoundaryTemplate(points=points)


def grid_template(width: int, height: int, step: int) -> BoundaryTemplate:
    """Every step-th pixel in both directions, row-major, as normal-boundary points."""
    if step < 1:
        raise InvalidArgument(f"step must be >= 1, got {step}")
    points = [TemplatePoint(x=x, y=y, probability=1.0, boundary_class=0)
              for y in range(0, height, step) for x in range(0, width, step)]
    return BoundaryTemplate(points=points)


def iou(a: BoundaryMap, b: BoundaryMap) -> float:
    """Intersection over union of two boundary maps (1 when both are empty)."""
    inter = np.logical_and(a.data, b.data).sum()
    union = np.logical_or(a.data, b.data).sum()
    return float(inter / union) if union else 1.0
