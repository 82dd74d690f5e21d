# src/core/models.py
"""
Domain Models
Pydantic models for the two sensing modalities, flow fields, correlation
structures and the reports produced by the pipeline.

Rasters are numpy arrays indexed [row, column] (that is [y, x]).
"""

from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class ArrayModel(BaseModel):
    """Base for models that carry numpy arrays."""
    model_config = ConfigDict(arbitrary_types_allowed=True)


# ---------------------------------------------------------------------------
# Event modality
# ---------------------------------------------------------------------------

class Event(BaseModel):
    """A single polarity event."""
    t: float = Field(ge=0.0)                   # seconds
    x: int                                     # pixel column
    y: int                                     # pixel row
    p: Literal[-1, 1]                          # polarity


class EventStream(ArrayModel):
    """Time-ordered events of one sensor, stored column-wise."""
    width: int
    height: int
    t_start: float = 0.0
    t_end: float = 0.0
    t: np.ndarray = Field(default_factory=lambda: np.zeros(0, dtype=np.float64))
    x: np.ndarray = Field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    y: np.ndarray = Field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    p: np.ndarray = Field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @model_validator(mode="after")
    def _check_invariants(self) -> "EventStream":
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        n = self.t.shape[0]
        if not (self.x.shape[0] == self.y.shape[0] == self.p.shape[0] == n):
            raise ValueError("event columns have different lengths")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise ValueError("events are not sorted by timestamp")
            if self.t[0] < self.t_start or self.t[-1] > self.t_end:
                raise ValueError("event timestamps outside [t_start, t_end]")
            if np.any((self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height)):
                raise ValueError("event coordinates outside the sensor")
            if np.any(np.abs(self.p) != 1):
                raise ValueError("polarity must be +1 or -1")
        return self

    def __len__(self) -> int:
        return int(self.t.shape[0])

    @property
    def events(self) -> List[Event]:
        return [Event(t=float(t), x=int(x), y=int(y), p=int(p))
                for t, x, y, p in zip(self.t, self.x, self.y, self.p)]

    @classmethod
    def from_events(cls, events: List[Event], width: int, height: int,
                    t_start: Optional[float] = None, t_end: Optional[float] = None) -> "EventStream":
        t = np.array([e.t for e in events], dtype=np.float64)
        first = float(t[0]) if len(t) else 0.0
        last = float(t[-1]) if len(t) else 0.0
        return cls(
            width=width, height=height,
            t_start=first if t_start is None else t_start,
            t_end=last if t_end is None else t_end,
            t=t,
            x=np.array([e.x for e in events], dtype=np.int64),
            y=np.array([e.y for e in events], dtype=np.int64),
            p=np.array([e.p for e in events], dtype=np.int64),
        )

    def select(self, keep: np.ndarray, t_start: float, t_end: float) -> "EventStream":
        """Sub-stream of the events flagged by `keep`, order preserved."""
        return EventStream(width=self.width, height=self.height, t_start=t_start, t_end=t_end,
                           t=self.t[keep], x=self.x[keep], y=self.y[keep], p=self.p[keep])


# ---------------------------------------------------------------------------
# Frame modality
# ---------------------------------------------------------------------------

class Image(ArrayModel):
    """Grayscale intensity raster with values in [0, 1]."""
    data: np.ndarray                           # (height, width) float64
    t: float = 0.0                             # seconds

    @model_validator(mode="after")
    def _check_range(self) -> "Image":
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("image data must be two-dimensional")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("image intensities must lie in [0, 1]")
        return self

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])


class FrameSequence(ArrayModel):
    frames: List[Image]

    @model_validator(mode="after")
    def _check_frames(self) -> "FrameSequence":
        for prev, cur in zip(self.frames, self.frames[1:]):
            if cur.t <= prev.t:
                raise ValueError("frame timestamps must be strictly increasing")
            if cur.data.shape != prev.data.shape:
                raise ValueError("frames must share dimensions")
        return self

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------------------
# Dense maps
# ---------------------------------------------------------------------------

class FlowField(ArrayModel):
    """Per-pixel displacement (pixels per interval)."""
    u: np.ndarray                              # horizontal component (height, width)
    v: np.ndarray                              # vertical component (height, width)

    @model_validator(mode="after")
    def _check_shape(self) -> "FlowField":
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("flow components must be equally shaped 2-D arrays")
        return self

    @property
    def width(self) -> int:
        return int(self.u.shape[1])

    @property
    def height(self) -> int:
        return int(self.u.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.u.shape

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        return cls(u=np.zeros((height, width)), v=np.zeros((height, width)))

    @classmethod
    def constant(cls, width: int, height: int, u: float, v: float) -> "FlowField":
        return cls(u=np.full((height, width), float(u)), v=np.full((height, width), float(v)))

    def scaled(self, factor: float) -> "FlowField":
        return FlowField(u=self.u * factor, v=self.v * factor)

    def at(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Flow vectors (N, 2) at integer pixel positions."""
        return np.stack([self.u[ys, xs], self.v[ys, xs]], axis=-1)


class ScalarMap(ArrayModel):
    """Signed scalar raster (brightness change, accumulated polarity)."""
    data: np.ndarray

    @model_validator(mode="after")
    def _check_finite(self) -> "ScalarMap":
        self.data = np.asarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("map contains non-finite values")
        return self

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])


class GradientMap(ScalarMap):
    """Temporal brightness change over the window (intensity units)."""


class GradientPair(ArrayModel):
    ix: np.ndarray                             # d/dx, intensity per pixel
    iy: np.ndarray                             # d/dy, intensity per pixel


class Distribution(ArrayModel):
    edges: np.ndarray                          # bins + 1 boundaries
    mass: np.ndarray                           # non-negative, sums to 1

    @model_validator(mode="after")
    def _check_mass(self) -> "Distribution":
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if self.edges.shape[0] != self.mass.shape[0] + 1:
            raise ValueError("edges must have one more entry than mass")
        if np.any(self.mass < 0) or abs(float(self.mass.sum()) - 1.0) > 1e-9:
            raise ValueError("mass must be non-negative and sum to 1")
        return self

    @property
    def bins(self) -> int:
        return int(self.mass.shape[0])


# ---------------------------------------------------------------------------
# Boundaries
# ---------------------------------------------------------------------------

class BoundaryMap(ArrayModel):
    data: np.ndarray                           # (height, width) uint8 in {0, 1}

    @model_validator(mode="after")
    def _check_binary(self) -> "BoundaryMap":
        self.data = np.asarray(self.data).astype(np.uint8)
        if np.any(self.data > 1):
            raise ValueError("boundary map must be binary")
        return self

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])


class TemplatePoint(BaseModel):
    x: int
    y: int
    probability: float = Field(ge=0.0, le=1.0)
    boundary_class: int = Field(ge=0)          # 0 = normal boundary


class BoundaryTemplate(ArrayModel):
    points: List[TemplatePoint] = []

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xs(self) -> np.ndarray:
        return np.array([pt.x for pt in self.points], dtype=np.int64)

    @property
    def ys(self) -> np.ndarray:
        return np.array([pt.y for pt in self.points], dtype=np.int64)


# ---------------------------------------------------------------------------
# Correlation structures
# ---------------------------------------------------------------------------

class FeatureMap(ArrayModel):
    data: np.ndarray                           # (channels, height, width)

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])

    @property
    def height(self) -> int:
        return int(self.data.shape[1])


class CorrelationVolume(ArrayModel):
    """Per-pixel correlation over a (2r+1)^2 displacement window.

    The last axis enumerates displacements row-major: dy outer, dx inner,
    both running from -radius to +radius.
    """
    data: np.ndarray                           # (height, width, (2r+1)^2)
    radius: int

    @model_validator(mode="after")
    def _check_window(self) -> "CorrelationVolume":
        self.data = np.asarray(self.data, dtype=np.float64)
        side = 2 * self.radius + 1
        if self.data.ndim != 3 or self.data.shape[2] != side * side:
            raise ValueError("volume window does not match its radius")
        return self

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def window_size(self) -> int:
        return int(self.data.shape[2])

    @property
    def displacements(self) -> np.ndarray:
        """(D, 2) array of (dx, dy) in window order."""
        r = self.radius
        dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
        return np.stack([dx.ravel(), dy.ravel()], axis=-1)

    def window(self, x: int, y: int) -> np.ndarray:
        return self.data[y, x]


class ClusterResult(ArrayModel):
    assignments: np.ndarray                    # (height, width) cluster id, -1 = none
    centers: np.ndarray                        # (k, 2 + D): x, y, mean clustering feature
    anchors: List[int]                         # template index anchoring each cluster
    cv_spa: CorrelationVolume
    objective_history: List[float] = []
    n_iter: int = 0


class MotionTrack(ArrayModel):
    point_index: int                           # index into the template
    origin: Tuple[int, int]                    # template pixel (x, y)
    state: np.ndarray                          # (x, y, u, v, c)
    covariance: np.ndarray                     # 5 x 5
    history: List[np.ndarray] = []             # state after each slice
    covariance_history: List[np.ndarray] = []
    measurements: List[Optional[np.ndarray]] = []   # (x, y, c) or None when rejected
    cv_temp_windows: List[np.ndarray] = []
    lost: bool = False
    lost_at: Optional[int] = None

    @property
    def positions(self) -> np.ndarray:
        """(T, 2) tracked positions, one per slice."""
        return np.array([s[:2] for s in self.history], dtype=np.float64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

class LossReport(BaseModel):
    pho: float = 0.0
    kl: float = 0.0
    entropy: float = 0.0
    spa: float = 0.0
    temp: float = 0.0
    consis: float = 0.0
    total: float = 0.0
    lambdas: Tuple[float, float, float, float, float] = (0.1, 0.1, 1.0, 1.0, 0.5)


class MetricsReport(BaseModel):
    epe: float = Field(ge=0.0)                 # pixels
    f1_all: float = Field(ge=0.0, le=100.0)    # percentage
    tepe: Optional[float] = None               # pixels
    n_valid: int = 0


class RefinementResult(ArrayModel):
    flow: FlowField
    loss_history: List[float] = []             # loss after each accepted step (index 0 = start)
    halvings: int = 0


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

class SceneSpec(BaseModel):
    width: int = 64
    height: int = 64
    texture: Literal["flat", "ramp", "noise"] = "noise"
    seed: int = 0
    ramp_slope: float = 0.1                    # intensity per pixel along x
    ramp_offset: float = 0.0
    motion: Literal["translation", "rotation", "two_region"] = "translation"
    motion_u: float = 3.0                      # px over the window
    motion_v: float = 0.0
    motion_u2: float = -2.0                    # right region (two_region only)
    motion_v2: float = 0.0
    rotation: float = 0.1                      # radians over the window
    T: int = 20
    duration: float = 1.0                      # seconds
    C: float = 0.05                            # trigger threshold
    n_frames: int = 2
    substeps: int = 200


class SynthBundle(ArrayModel):
    spec: SceneSpec
    frames: FrameSequence
    stream: EventStream                        # every event in [0, duration]
    slices: List[EventStream]
    gt_flow_total: FlowField
    gt_flow_slices: List[FlowField]
    region_labels: np.ndarray                  # (height, width) motion region id
    gt_tracks: Optional[np.ndarray] = None     # (height*width, T, 2) row-major per-pixel positions
    blur_len: int = 1
    drop: int = 1
