#!/usr/bin/env python3
"""
Evaluation Service
End-point error, F1-all and trajectory error metrics, flow accumulation and
the flow colour wheel.
"""

import logging
from typing import Optional, Sequence

import numpy as np
from PIL import Image as PILImage

from src.core.errors import DimensionMismatch, EmptyMask, InvalidArgument, LengthMismatch
from src.core.models import FlowField, MetricsReport, MotionTrack
from src.services import bilinear

logger = logging.getLogger(__name__)

OUTLIER_PX = 3.0
OUTLIER_REL = 0.05


def _valid_mask(flow: FlowField, gt: FlowField, mask: Optional[np.ndarray]) -> np.ndarray:
    if flow.shape != gt.shape:
        raise DimensionMismatch(f"flow {flow.shape} vs ground truth {gt.shape}")
    if mask is None:
        valid = np.ones(flow.shape, dtype=bool)
    else:
        valid = np.asarray(mask).astype(bool)
        if valid.shape != flow.shape:
            raise DimensionMismatch(f"mask {valid.shape} vs flow {flow.shape}")
    if not valid.any():
        raise EmptyMask("no valid pixel to evaluate")
    return valid


def _endpoint_errors(flow: FlowField, gt: FlowField) -> np.ndarray:
    return np.hypot(flow.u - gt.u, flow.v - gt.v)


def epe(flow: FlowField, gt: FlowField, mask: Optional[np.ndarray] = None) -> float:
    """Mean endpoint error over valid pixels."""
    valid = _valid_mask(flow, gt, mask)
    return float(_endpoint_errors(flow, gt)[valid].mean())


def f1_all(flow: FlowField, gt: FlowField, mask: Optional[np.ndarray] = None) -> float:
    """Percentage of valid pixels with error > 3 px and > 5% of the ground-truth magnitude."""
    valid = _valid_mask(flow, gt, mask)
    err = _endpoint_errors(flow, gt)
    outlier = (err > OUTLIER_PX) & (err > OUTLIER_REL * np.hypot(gt.u, gt.v))
    return float(100.0 * outlier[valid].mean())


def tepe(tracks: Sequence[MotionTrack], gt_tracks: np.ndarray) -> float:
    """
    Mean over tracks and slices of the tracked-to-true position distance.

    gt_tracks: (N, T, 2) ground-truth positions in track order.
    """
    gt_tracks = np.asarray(gt_tracks, dtype=np.float64)
    if gt_tracks.ndim != 3 or gt_tracks.shape[0] != len(tracks):
        raise LengthMismatch(f"{len(tracks)} tracks vs ground truth {gt_tracks.shape}")
    if not tracks:
        raise LengthMismatch("no tracks to evaluate")
    return trajectory_error(np.stack([t.positions for t in tracks]), gt_tracks)


def trajectory_error(positions: np.ndarray, gt_tracks: np.ndarray) -> float:
    """tepe on bare (N, T, 2) position arrays."""
    positions = np.asarray(positions, dtype=np.float64)
    gt_tracks = np.asarray(gt_tracks, dtype=np.float64)
    if positions.shape != gt_tracks.shape or positions.ndim != 3 or positions.shape[0] == 0:
        raise LengthMismatch(f"tracked {positions.shape} vs ground truth {gt_tracks.shape}")
    return float(np.linalg.norm(positions - gt_tracks, axis=-1).mean())


def compose(flows: Sequence[FlowField]) -> FlowField:
    """acc <- acc + flow_k sampled at x + acc, starting from acc = flow_0."""
    if not flows:
        raise InvalidArgument("compose needs at least one flow field")
    shape = flows[0].shape
    xs, ys = bilinear.pixel_grid(*shape)
    acc_u = flows[0].u.copy()
    acc_v = flows[0].v.copy()
    for k, flow in enumerate(flows[1:], start=1):
        if flow.shape != shape:
            raise DimensionMismatch(f"slice {k} flow {flow.shape} vs {shape}")
        px, py = xs + acc_u, ys + acc_v
        acc_u = acc_u + bilinear.sample(flow.u, px, py)
        acc_v = acc_v + bilinear.sample(flow.v, px, py)
    return FlowField(u=acc_u, v=acc_v)


def compose_points(increments: np.ndarray) -> np.ndarray:
    """
    Accumulate (T, N, 2) per-slice point displacements into (N, 2) totals.

    Each increment is already measured at the point's current position, so
    composition along a trajectory reduces to summation.
    """
    increments = np.asarray(increments, dtype=np.float64)
    if increments.ndim != 3 or increments.shape[0] == 0:
        raise DimensionMismatch(f"expected (T, N, 2) increments, got {increments.shape}")
    return increments.sum(axis=0)


def metrics_report(flow: FlowField, gt: FlowField, mask: Optional[np.ndarray] = None,
                   positions: Optional[np.ndarray] = None,
                   gt_tracks: Optional[np.ndarray] = None) -> MetricsReport:
    """EPE/F1-all over the valid pixels, plus TEPE when (N, T, 2) trajectories are supplied."""
    valid = _valid_mask(flow, gt, mask)
    track_error = None
    if positions is not None and gt_tracks is not None:
        track_error = trajectory_error(positions, gt_tracks)
    report = MetricsReport(epe=epe(flow, gt, valid), f1_all=f1_all(flow, gt, valid),
                           tepe=track_error, n_valid=int(valid.sum()))
    logger.info(f"Metrics: EPE {report.epe:.4f}, F1-all {report.f1_all:.2f}%, TEPE {report.tepe}")
    return report


# ---------------------------------------------------------------------------
# Visualization
# ---------------------------------------------------------------------------

def flow_to_hsv(flow: FlowField, max_mag: float) -> np.ndarray:
    """(H, W, 3) hue/saturation/value in [0, 1]; hue = atan2(v, u) / 2pi."""
    if max_mag <= 0:
        raise InvalidArgument(f"max_mag must be > 0, got {max_mag}")
    hue = (np.arctan2(flow.v, flow.u) / (2.0 * np.pi)) % 1.0
    sat = np.minimum(np.hypot(flow.u, flow.v) / max_mag, 1.0)
    return np.stack([hue, sat, np.ones_like(hue)], axis=-1)


def flow_to_color(flow: FlowField, max_mag: float) -> np.ndarray:
    """(H, W, 3) uint8 colour-wheel rendering; zero flow is white."""
    hsv = np.round(flow_to_hsv(flow, max_mag) * 255.0).astype(np.uint8)
    height, width = flow.shape
    return np.array(PILImage.frombytes("HSV", (width, height), hsv.tobytes()).convert("RGB"))
