#!/usr/bin/env python3
"""
Synthetic Scene Service
Renders a moving procedural texture, emits threshold-crossing events and
the analytic ground-truth motion, and applies blur / frame decimation.

Brightness model: an event fires whenever the (linear) intensity at a pixel
moves a full threshold C away from the level of the last event there.
"""

import logging

import numpy as np
from scipy import ndimage

from src.core.errors import InvalidSpec
from src.core.models import (
    EventStream,
    FlowField,
    FrameSequence,
    Image,
    SceneSpec,
    SynthBundle,
)
from src.services.event_io import slice_events

logger = logging.getLogger(__name__)

_TOL = 1e-6  # crossing tolerance, in units of C


def validate_spec(spec: SceneSpec) -> None:
    if spec.T < 1:
        raise InvalidSpec(f"T must be >= 1, got {spec.T}")
    if spec.duration <= 0:
        raise InvalidSpec(f"duration must be > 0, got {spec.duration}")
    if spec.C <= 0:
        raise InvalidSpec(f"C must be > 0, got {spec.C}")
    if spec.width < 3 or spec.height < 3:
        raise InvalidSpec(f"scene too small: {spec.width}x{spec.height}")
    if spec.n_frames < 2:
        raise InvalidSpec(f"n_frames must be >= 2, got {spec.n_frames}")
    if spec.substeps < 1:
        raise InvalidSpec(f"substeps must be >= 1, got {spec.substeps}")


class _Texture:
    """Procedural texture sampled bilinearly in image coordinates."""

    def __init__(self, spec: SceneSpec):
        self.margin = int(np.ceil(self._max_displacement(spec))) + 4
        m = self.margin
        h, w = spec.height + 2 * m, spec.width + 2 * m
        if spec.texture == "flat":
            self.raster = np.full((h, w), 0.5)
        elif spec.texture == "ramp":
            cols = np.arange(w, dtype=np.float64) - m
            self.raster = np.tile(spec.ramp_offset + spec.ramp_slope * cols, (h, 1))
        else:
            rng = np.random.default_rng(spec.seed)
            noise = ndimage.gaussian_filter(rng.random((h, w)), sigma=2.0)
            lo, hi = noise.min(), noise.max()
            self.raster = 0.1 + 0.8 * (noise - lo) / max(hi - lo, 1e-12)

    @staticmethod
    def _max_displacement(spec: SceneSpec) -> float:
        # blur renders may extrapolate up to one extra window on either side
        if spec.motion == "rotation":
            radius = np.hypot(spec.width, spec.height) / 2.0
            return radius * min(abs(spec.rotation) * 2.0, np.pi)
        shift = max(np.hypot(spec.motion_u, spec.motion_v), np.hypot(spec.motion_u2, spec.motion_v2))
        return shift * 2.0

    def sample(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        coords = np.stack([ys + self.margin, xs + self.margin])
        values = ndimage.map_coordinates(self.raster, coords, order=1, mode="nearest")
        return np.clip(values, 0.0, 1.0)


def region_labels(spec: SceneSpec) -> np.ndarray:
    """Motion region per pixel: 0 everywhere except the right half of two-region scenes."""
    labels = np.zeros((spec.height, spec.width), dtype=np.int64)
    if spec.motion == "two_region":
        labels[:, spec.width // 2:] = 1
    return labels


def _grid(spec: SceneSpec):
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    return xs, ys


def _center(spec: SceneSpec):
    return (spec.width - 1) / 2.0, (spec.height - 1) / 2.0


def _rotate(xs, ys, angle, cx, cy):
    c, s = np.cos(angle), np.sin(angle)
    dx, dy = xs - cx, ys - cy
    return cx + c * dx - s * dy, cy + s * dx + c * dy


def displaced(spec: SceneSpec, xs: np.ndarray, ys: np.ndarray, s: float, labels: np.ndarray = None):
    """Where content at (xs, ys) at s=0 sits at window fraction s."""
    if spec.motion == "rotation":
        cx, cy = _center(spec)
        return _rotate(xs, ys, s * spec.rotation, cx, cy)
    if spec.motion == "two_region":
        right = (labels == 1) if labels is not None else (xs >= spec.width // 2)
        u = np.where(right, spec.motion_u2, spec.motion_u)
        v = np.where(right, spec.motion_v2, spec.motion_v)
        return xs + s * u, ys + s * v
    return xs + s * spec.motion_u, ys + s * spec.motion_v


def render(spec: SceneSpec, s: float, texture: "_Texture" = None) -> np.ndarray:
    """Intensity raster at window fraction s (s = t / duration)."""
    texture = texture or _Texture(spec)
    xs, ys = _grid(spec)
    if spec.motion == "rotation":
        cx, cy = _center(spec)
        src_x, src_y = _rotate(xs, ys, -s * spec.rotation, cx, cy)
    elif spec.motion == "two_region":
        labels = region_labels(spec)
        u = np.where(labels == 1, spec.motion_u2, spec.motion_u)
        v = np.where(labels == 1, spec.motion_v2, spec.motion_v)
        src_x, src_y = xs - s * u, ys - s * v
    else:
        src_x, src_y = xs - s * spec.motion_u, ys - s * spec.motion_v
    return texture.sample(src_x, src_y)


def _flow_between(spec: SceneSpec, s0: float, s1: float) -> FlowField:
    """Analytic displacement of content from s0 to s1, sampled on the pixel grid."""
    xs, ys = _grid(spec)
    if spec.motion == "rotation":
        cx, cy = _center(spec)
        x1, y1 = _rotate(xs, ys, (s1 - s0) * spec.rotation, cx, cy)
    else:
        x1, y1 = displaced(spec, xs, ys, s1 - s0, region_labels(spec))
    return FlowField(u=x1 - xs, v=y1 - ys)


def simulate_events(spec: SceneSpec, texture: "_Texture" = None) -> EventStream:
    """
    Threshold-crossing event emission over the whole window.

    Intensity is sampled at `substeps` instants and taken as linear in
    between; each crossing of the next level gets an interpolated timestamp.
    """
    texture = texture or _Texture(spec)
    n = spec.substeps
    dt = spec.duration / n
    prev = render(spec, 0.0, texture)
    ref = prev.copy()

    chunks_t, chunks_x, chunks_y, chunks_p = [], [], [], []
    for j in range(n):
        cur = render(spec, (j + 1) / n, texture)
        delta = cur - ref
        n_up = np.where(delta > 0, np.floor(delta / spec.C + _TOL), 0).astype(np.int64)
        n_down = np.where(delta < 0, np.floor(-delta / spec.C + _TOL), 0).astype(np.int64)
        slope = cur - prev

        for counts, sign in ((n_up, 1), (n_down, -1)):
            ys, xs = np.nonzero(counts)
            if ys.size == 0:
                continue
            reps = counts[ys, xs]
            ey = np.repeat(ys, reps)
            ex = np.repeat(xs, reps)
            # k-th crossing level above (or below) the reference
            starts = np.repeat(np.cumsum(reps) - reps, reps)
            offsets = np.arange(ey.size) - starts + 1
            levels = ref[ey, ex] + sign * offsets * spec.C
            s = slope[ey, ex]
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(s != 0, (levels - prev[ey, ex]) / s, 1.0)
            frac = np.clip(frac, 0.0, 1.0)
            chunks_t.append((j + frac) * dt)
            chunks_x.append(ex)
            chunks_y.append(ey)
            chunks_p.append(np.full(ey.shape, sign, dtype=np.int64))
            ref[ys, xs] += sign * reps * spec.C
        prev = cur

    if chunks_t:
        t = np.concatenate(chunks_t)
        x = np.concatenate(chunks_x)
        y = np.concatenate(chunks_y)
        p = np.concatenate(chunks_p)
        t = np.minimum(t, spec.duration)
        order = np.lexsort((x, y, t))
        t, x, y, p = t[order], x[order], y[order], p[order]
    else:
        t = np.zeros(0)
        x = y = p = np.zeros(0, dtype=np.int64)
    return EventStream(width=spec.width, height=spec.height, t_start=0.0, t_end=spec.duration,
                       t=t, x=x, y=y, p=p)


def gen_scene(spec: SceneSpec) -> SynthBundle:
    """
    Generate paired frames, events and ground-truth flow for a scene.

    Frames are rendered at n_frames evenly spaced instants over the window;
    flows are in pixels per window (total) and per slice.
    """
    validate_spec(spec)
    texture = _Texture(spec)

    times = np.linspace(0.0, spec.duration, spec.n_frames)
    frames = FrameSequence(frames=[
        Image(data=render(spec, t / spec.duration, texture), t=float(t)) for t in times
    ])
    stream = simulate_events(spec, texture)
    slices = slice_events(stream, 0.0, spec.duration, spec.T)

    gt_total = _flow_between(spec, 0.0, 1.0)
    gt_slices = [_flow_between(spec, k / spec.T, (k + 1) / spec.T) for k in range(spec.T)]

    logger.info(f"Generated {spec.motion} scene {spec.width}x{spec.height} "
                f"({spec.texture} texture): {len(stream)} events, {spec.n_frames} frames")
    return SynthBundle(spec=spec, frames=frames, stream=stream, slices=slices,
                       gt_flow_total=gt_total, gt_flow_slices=gt_slices,
                       region_labels=region_labels(spec), gt_tracks=dense_ground_truth_tracks(spec))


def blurred_frame(spec: SceneSpec, t: float, blur_len: int, texture: "_Texture" = None) -> np.ndarray:
    """Mean of blur_len renders centred on t, one slice apart."""
    texture = texture or _Texture(spec)
    step = spec.duration / spec.T
    offsets = (np.arange(blur_len) - (blur_len - 1) / 2.0) * step
    renders = [render(spec, (t + o) / spec.duration, texture) for o in offsets]
    return np.mean(renders, axis=0)


def degrade(bundle: SynthBundle, blur_len: int, drop: int) -> SynthBundle:
    """Motion-blur every frame, then keep every drop-th frame. Events and gt are untouched."""
    if blur_len < 1:
        raise InvalidSpec(f"blur_len must be >= 1, got {blur_len}")
    if drop < 1:
        raise InvalidSpec(f"drop must be >= 1, got {drop}")

    frames = bundle.frames.frames
    if blur_len > 1:
        texture = _Texture(bundle.spec)
        frames = [Image(data=np.clip(blurred_frame(bundle.spec, f.t, blur_len, texture), 0.0, 1.0), t=f.t)
                  for f in frames]
    frames = frames[::drop]

    logger.info(f"Degraded scene: blur_len={blur_len}, drop={drop}, {len(frames)} frames kept")
    return bundle.model_copy(update={
        "frames": FrameSequence(frames=list(frames)),
        "blur_len": blur_len if blur_len > 1 else bundle.blur_len,
        "drop": bundle.drop * drop,
    })


def ground_truth_tracks(spec: SceneSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """(N, T, 2) analytic positions of the given pixels at the end of each slice."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    labels = region_labels(spec)[ys.astype(np.int64), xs.astype(np.int64)]
    positions = []
    for k in range(spec.T):
        px, py = displaced(spec, xs, ys, (k + 1) / spec.T, labels)
        positions.append(np.stack([px, py], axis=-1))
    return np.stack(positions, axis=1)


def dense_ground_truth_tracks(spec: SceneSpec) -> np.ndarray:
    """(height*width, T, 2) ground-truth tracks of every pixel, row-major."""
    ys, xs = np.mgrid[0:spec.height, 0:spec.width]
    return ground_truth_tracks(spec, xs.ravel(), ys.ravel())


def boundary_degradation_probability(bundle: SynthBundle) -> np.ndarray:
    """
    Per-pixel probability that the boundary is intact, from the blur extent.

    Extent is |per-slice flow| * (blur_len - 1) pixels; probability is
    1 / (1 + extent), so unblurred frames give 1 everywhere.
    """
    per_slice = bundle.gt_flow_total.scaled(1.0 / bundle.spec.T)
    extent = np.hypot(per_slice.u, per_slice.v) * (bundle.blur_len - 1)
    return 1.0 / (1.0 + extent)
