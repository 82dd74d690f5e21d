#!/usr/bin/env python3
"""
Correlation Fusion Service
Template-guided spatial clustering of the frame volume, Kalman tracking
through the per-slice event volumes, scaled dot-product attention between
the two, soft-argmax decoding and the three fusion losses.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage
from sklearn.cluster import DBSCAN
from sklearn.mixture import GaussianMixture
from sklearn.neighbors import NearestNeighbors

from src.core.errors import (
    DegenerateK,
    DimensionMismatch,
    EmptyInput,
    EmptyTemplate,
    InvalidArgument,
    LostTrack,
    NoTracks,
)
from src.core.models import (
    BoundaryTemplate,
    ClusterResult,
    CorrelationVolume,
    FlowField,
    MotionTrack,
)
from src.services.correlation import window_argmax
from src.services.evaluation import compose_points

logger = logging.getLogger(__name__)

# constant-velocity transition over (x, y, u, v, c)
F_MATRIX = np.array([
    [1.0, 0.0, 1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 1.0],
])

# observes (x, y, c)
H_MATRIX = np.array([
    [1.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 1.0],
])

DEFAULT_Q = np.diag([0.1, 0.1, 0.5, 0.5, 0.05])
DEFAULT_R = np.diag([1.0, 1.0, 0.1])


# ---------------------------------------------------------------------------
# Spatial matching
# ---------------------------------------------------------------------------

def _joint_sq_distance(xs, ys, windows, center, alpha, diag):
    spatial = ((xs - center[0]) ** 2 + (ys - center[1]) ** 2) / (diag * diag)
    appearance = np.sum((windows - center[2:]) ** 2, axis=-1)
    return alpha * spatial + (1.0 - alpha) * appearance


def motion_features(cv: CorrelationVolume, temperature: float = 0.1, smooth: int = 0) -> np.ndarray:
    """
    (H, W, D) per-pixel match distributions: softmax(cv / temperature) over
    the window, box-averaged over a (2*smooth + 1)^2 neighbourhood.
    """
    if temperature <= 0:
        raise InvalidArgument(f"temperature must be > 0, got {temperature}")
    if smooth < 0:
        raise InvalidArgument(f"smooth must be >= 0, got {smooth}")
    weights = _softmax(cv.data / temperature)
    if smooth == 0:
        return weights
    size = 2 * smooth + 1
    return ndimage.uniform_filter(weights, size=(size, size, 1), mode="nearest")


def _check_template(tmpl: BoundaryTemplate, k: Optional[int]) -> int:
    n_points = len(tmpl)
    if n_points == 0:
        raise EmptyTemplate("spatial matching needs a non-empty template")
    if k is None:
        k = min(n_points, 8)
    if k < 1 or k > n_points:
        raise DegenerateK(f"k must lie in [1, {n_points}], got {k}")
    return k


def _pixel_space(cv_frame: CorrelationVolume, features: Optional[np.ndarray]):
    """Flattened pixel coordinates and clustering features of every pixel."""
    height, width = cv_frame.height, cv_frame.width
    feats = cv_frame.data if features is None else np.asarray(features, dtype=np.float64)
    if feats.ndim != 3 or feats.shape[:2] != (height, width):
        raise DimensionMismatch(f"features {feats.shape} do not cover a {width}x{height} raster")
    ys_grid, xs_grid = np.mgrid[0:height, 0:width]
    return (xs_grid.ravel().astype(np.float64), ys_grid.ravel().astype(np.float64),
            feats.reshape(height * width, -1), feats, float(np.hypot(width, height)))


def seed_points(tmpl: BoundaryTemplate, feats: np.ndarray, k: int, alpha: float, diag: float,
                init: str = "first") -> np.ndarray:
    """
    Template indices that seed the k centres.

    "first" takes the first k points. "farthest" starts at point 0 and keeps
    adding the point with the largest joint distance to its nearest seed.
    """
    if init == "first":
        return np.arange(k)
    if init != "farthest":
        raise InvalidArgument(f"init must be 'first' or 'farthest', got {init!r}")
    tx, ty = tmpl.xs.astype(np.float64), tmpl.ys.astype(np.float64)
    windows = feats[tmpl.ys, tmpl.xs]
    points = np.concatenate([np.stack([tx, ty], axis=1), windows], axis=1)
    chosen = [0]
    nearest = _joint_sq_distance(tx, ty, windows, points[0], alpha, diag)
    for _ in range(1, k):
        pick = int(np.argmax(nearest))
        chosen.append(pick)
        nearest = np.minimum(nearest, _joint_sq_distance(tx, ty, windows, points[pick], alpha, diag))
    return np.array(chosen, dtype=np.int64)


def _cluster_result(cv_frame: CorrelationVolume, tmpl: BoundaryTemplate, assignments: np.ndarray,
                    centers: np.ndarray, feats: np.ndarray, alpha: float, diag: float,
                    objective_history: List[float], n_iter: int) -> ClusterResult:
    """Anchors and cv_spa for a finished pixel partition."""
    height, width = cv_frame.height, cv_frame.width
    tx, ty = tmpl.xs, tmpl.ys
    txf, tyf = tx.astype(np.float64), ty.astype(np.float64)
    tmpl_clusters = assignments.reshape(height, width)[ty, tx]
    tmpl_feats = feats[ty, tx]

    # anchor: member template point nearest the centre, else the nearest template point overall
    anchors: List[int] = []
    for cluster in range(centers.shape[0]):
        members = np.nonzero(tmpl_clusters == cluster)[0]
        if members.size == 0:
            members = np.arange(len(tmpl))
        d = _joint_sq_distance(txf[members], tyf[members], tmpl_feats[members], centers[cluster], alpha, diag)
        anchors.append(int(members[np.argmin(d)]))

    anchor_windows = np.stack([cv_frame.data[ty[a], tx[a]] for a in anchors])
    cv_spa = CorrelationVolume(data=anchor_windows[assignments].reshape(cv_frame.data.shape),
                               radius=cv_frame.radius)
    return ClusterResult(assignments=assignments.reshape(height, width), centers=centers,
                         anchors=anchors, cv_spa=cv_spa, objective_history=objective_history,
                         n_iter=n_iter)


def spatial_match(cv_frame: CorrelationVolume, tmpl: BoundaryTemplate, k: Optional[int] = None,
                  alpha: float = 0.5, tol: float = 1e-4, max_iter: int = 50,
                  seed: int = 0, init: str = "first",
                  features: Optional[np.ndarray] = None) -> ClusterResult:
    """
    Lloyd K-Means over every pixel in the joint (position, feature) space.

    Squared joint distance: alpha * |dp / diag|^2 + (1 - alpha) * |df|^2.
    Features default to the correlation windows of cv_frame; pass an
    (H, W, D) array such as motion_features to cluster on something else.
    Centres start at the template points chosen by seed_points; equidistant
    pixels go to the lower cluster id. cv_spa gives each pixel the window of
    its cluster's anchor (the member template point nearest the centre).
    """
    k = _check_template(tmpl, k)
    if alpha < 0:
        raise InvalidArgument(f"alpha must be >= 0, got {alpha}")
    xs, ys, windows, feats, diag = _pixel_space(cv_frame, features)

    seeds = seed_points(tmpl, feats, k, alpha, diag, init)
    tx, ty = tmpl.xs[seeds], tmpl.ys[seeds]
    centers = np.concatenate([np.stack([tx, ty], axis=1).astype(np.float64), feats[ty, tx]], axis=1)

    rng = np.random.default_rng(seed)
    assignments = np.full(xs.shape[0], -1, dtype=np.int64)
    objective_history: List[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        distances = np.stack([_joint_sq_distance(xs, ys, windows, c, alpha, diag) for c in centers], axis=1)
        new_assignments = np.argmin(distances, axis=1)  # first minimum = lower id
        objective_history.append(float(distances[np.arange(xs.shape[0]), new_assignments].sum()))

        new_centers = centers.copy()
        for cluster in range(k):
            members = new_assignments == cluster
            if members.any():
                new_centers[cluster, 0] = xs[members].mean()
                new_centers[cluster, 1] = ys[members].mean()
                new_centers[cluster, 2:] = windows[members].mean(axis=0)
            else:
                pick = int(rng.integers(xs.shape[0]))
                logger.debug(f"K-Means: cluster {cluster} empty, reseeded at pixel {pick}")
                new_centers[cluster] = np.concatenate([[xs[pick], ys[pick]], windows[pick]])

        shift = float(np.max(np.abs(new_centers - centers)))
        unchanged = np.array_equal(new_assignments, assignments)
        assignments, centers = new_assignments, new_centers
        logger.debug(f"K-Means iteration {n_iter}: objective {objective_history[-1]:.6f}, shift {shift:.2e}")
        if unchanged or shift < tol:
            break

    logger.info(f"Spatial matching: k={k}, {n_iter} iterations, objective {objective_history[-1]:.4f}")
    return _cluster_result(cv_frame, tmpl, assignments, centers, feats, alpha, diag, objective_history, n_iter)


def _scaled_space(xs, ys, windows, alpha, diag) -> np.ndarray:
    """Rows whose squared Euclidean distance is the joint distance."""
    position = np.stack([xs, ys], axis=1) * (np.sqrt(alpha) / diag)
    return np.concatenate([position, windows * np.sqrt(1.0 - alpha)], axis=1)


def _member_centers(xs, ys, windows, assignments, k) -> np.ndarray:
    rows = np.concatenate([np.stack([xs, ys], axis=1), windows], axis=1)
    return np.stack([rows[assignments == c].mean(axis=0) for c in range(k)])


def _objective(xs, ys, windows, assignments, centers, alpha, diag) -> float:
    return float(sum(_joint_sq_distance(xs[assignments == c], ys[assignments == c],
                                        windows[assignments == c], centers[c], alpha, diag).sum()
                     for c in range(centers.shape[0])))


def gmm_match(cv_frame: CorrelationVolume, tmpl: BoundaryTemplate, k: Optional[int] = None,
              alpha: float = 0.5, tol: float = 1e-4, max_iter: int = 50, seed: int = 0,
              init: str = "first", features: Optional[np.ndarray] = None) -> ClusterResult:
    """Diagonal Gaussian mixture in the joint space, means seeded like spatial_match."""
    k = _check_template(tmpl, k)
    if not 0 <= alpha <= 1:
        raise InvalidArgument(f"alpha must lie in [0, 1], got {alpha}")
    xs, ys, windows, feats, diag = _pixel_space(cv_frame, features)
    rows = _scaled_space(xs, ys, windows, alpha, diag)
    seeds = seed_points(tmpl, feats, k, alpha, diag, init)
    means = rows[tmpl.ys[seeds] * cv_frame.width + tmpl.xs[seeds]]

    model = GaussianMixture(n_components=k, covariance_type="diag", tol=tol, max_iter=max_iter,
                            means_init=means, random_state=seed, reg_covar=1e-6)
    assignments = model.fit_predict(rows).astype(np.int64)
    # relabel onto the clusters that actually received pixels
    used, assignments = np.unique(assignments, return_inverse=True)
    centers = _member_centers(xs, ys, windows, assignments, used.size)
    objective = _objective(xs, ys, windows, assignments, centers, alpha, diag)
    logger.info(f"Spatial matching (GMM): k={used.size}, {model.n_iter_} iterations, objective {objective:.4f}")
    return _cluster_result(cv_frame, tmpl, assignments, centers, feats, alpha, diag, [objective],
                           int(model.n_iter_))


def dbscan_match(cv_frame: CorrelationVolume, tmpl: BoundaryTemplate, alpha: float = 0.5,
                 min_samples: int = 8, features: Optional[np.ndarray] = None) -> ClusterResult:
    """
    Density clustering in the joint space; the cluster count is data-driven.

    eps is the median distance to the min_samples-th neighbour. Noise pixels
    join the cluster with the nearest centre; all noise gives one cluster.
    """
    _check_template(tmpl, 1)
    if not 0 <= alpha <= 1:
        raise InvalidArgument(f"alpha must lie in [0, 1], got {alpha}")
    if min_samples < 1:
        raise InvalidArgument(f"min_samples must be >= 1, got {min_samples}")
    xs, ys, windows, feats, diag = _pixel_space(cv_frame, features)
    rows = _scaled_space(xs, ys, windows, alpha, diag)

    neighbours = min(min_samples, rows.shape[0] - 1) + 1
    distances, _ = NearestNeighbors(n_neighbors=neighbours).fit(rows).kneighbors(rows)
    # widened a hair so grid neighbours exactly at the median distance stay inside
    eps = max(float(np.median(distances[:, -1])) * (1.0 + 1e-6), 1e-12)
    labels = DBSCAN(eps=eps, min_samples=min_samples).fit_predict(rows).astype(np.int64)

    k = int(labels.max()) + 1
    if k == 0:
        assignments = np.zeros(rows.shape[0], dtype=np.int64)
        k = 1
    else:
        assignments = labels.copy()
        noise = labels < 0
        if noise.any():
            core = _member_centers(xs[~noise], ys[~noise], windows[~noise], labels[~noise], k)
            d = np.stack([_joint_sq_distance(xs[noise], ys[noise], windows[noise], c, alpha, diag)
                          for c in core], axis=1)
            assignments[noise] = np.argmin(d, axis=1)
    centers = _member_centers(xs, ys, windows, assignments, k)
    objective = _objective(xs, ys, windows, assignments, centers, alpha, diag)
    logger.info(f"Spatial matching (DBSCAN): eps {eps:.4f}, {k} clusters, objective {objective:.4f}")
    return _cluster_result(cv_frame, tmpl, assignments, centers, feats, alpha, diag, [objective], 1)


def cluster_pixels(strategy: str, cv_frame: CorrelationVolume, tmpl: BoundaryTemplate,
                   k: Optional[int] = None, alpha: float = 0.5, tol: float = 1e-4,
                   max_iter: int = 50, seed: int = 0, init: str = "first",
                   features: Optional[np.ndarray] = None, min_samples: int = 8) -> ClusterResult:
    """Dispatch to K-Means ("kmeans"), a Gaussian mixture ("gmm") or DBSCAN ("dbscan")."""
    if strategy == "kmeans":
        return spatial_match(cv_frame, tmpl, k, alpha, tol, max_iter, seed, init, features)
    if strategy == "gmm":
        return gmm_match(cv_frame, tmpl, k, alpha, tol, max_iter, seed, init, features)
    if strategy == "dbscan":
        return dbscan_match(cv_frame, tmpl, alpha, min_samples, features)
    raise InvalidArgument(f"unknown clustering strategy {strategy!r}")


# ---------------------------------------------------------------------------
# Temporal tracking
# ---------------------------------------------------------------------------

@dataclass
class KalmanStep:
    """
    Kalman predict/update over one track or a batch of tracks.

    States are (..., 5) and covariances (..., 5, 5). F and H are linear so
    the EKF Jacobians are constant.
    """
    Q: np.ndarray = field(default_factory=lambda: DEFAULT_Q.copy())
    R: np.ndarray = field(default_factory=lambda: DEFAULT_R.copy())

    def transition_jacobian(self, state: np.ndarray) -> np.ndarray:
        return F_MATRIX

    def observation_jacobian(self, state: np.ndarray) -> np.ndarray:
        return H_MATRIX

    def predict(self, state: np.ndarray, cov: np.ndarray):
        F = self.transition_jacobian(state)
        return state @ F.T, F @ cov @ F.T + self.Q

    def update(self, state: np.ndarray, cov: np.ndarray, z: np.ndarray):
        H = self.observation_jacobian(state)
        S = H @ cov @ H.T + self.R
        # cov H^T S^-1, with S and cov symmetric
        gain = np.swapaxes(np.linalg.solve(S, H @ cov), -1, -2)
        innovation = z - state @ H.T
        state = state + (gain @ innovation[..., None])[..., 0]
        cov = (np.eye(state.shape[-1]) - gain @ H) @ cov
        return state, 0.5 * (cov + np.swapaxes(cov, -1, -2))


def slice_warp_positions(init_flow: FlowField, xs: np.ndarray, ys: np.ndarray, k: int, T: int) -> np.ndarray:
    """(N, 2) centre of the slice-k search window: p + U(p) * (k + 1) / T."""
    frac = (k + 1) / T
    return np.stack([xs + init_flow.u[ys, xs] * frac, ys + init_flow.v[ys, xs] * frac], axis=-1)


def temporal_track(cv_slices: Sequence[CorrelationVolume], tmpl: BoundaryTemplate, init_flow: FlowField,
                   Q: Optional[np.ndarray] = None, R: Optional[np.ndarray] = None,
                   c_min: float = 0.1, lost_after: int = 3) -> List[MotionTrack]:
    """
    Kalman-track every template point through the per-slice event volumes.

    Slice k's volume is indexed by reference pixel and centred on
    p + U(p)(k+1)/T. The measurement is the window argmax among positions
    within the volume radius of the prediction; peaks below c_min are
    rejected, and lost_after consecutive rejections end the track.
    """
    T = len(cv_slices)
    if T < 1:
        raise InvalidArgument("tracking needs at least one slice volume")
    if len(tmpl) == 0:
        raise EmptyTemplate("tracking needs a non-empty template")
    Q = DEFAULT_Q.copy() if Q is None else np.asarray(Q, dtype=np.float64)
    R = DEFAULT_R.copy() if R is None else np.asarray(R, dtype=np.float64)
    for name, m in (("Q", Q), ("R", R)):
        if not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() < -1e-12:
            raise InvalidArgument(f"{name} must be symmetric positive semi-definite")
    if init_flow.shape != (cv_slices[0].height, cv_slices[0].width):
        raise DimensionMismatch("initial flow does not match the volumes")

    kalman = KalmanStep(Q=Q, R=R)
    radius = cv_slices[0].radius
    displacements = cv_slices[0].displacements.astype(np.float64)
    xs, ys = tmpl.xs, tmpl.ys
    n = xs.shape[0]

    state = np.zeros((n, 5))
    state[:, 0] = xs
    state[:, 1] = ys
    state[:, 2] = init_flow.u[ys, xs] / T
    state[:, 3] = init_flow.v[ys, xs] / T
    state[:, 4] = cv_slices[0].data[ys, xs, displacements.shape[0] // 2]
    cov = np.broadcast_to(np.eye(5), (n, 5, 5)).copy()

    misses = np.zeros(n, dtype=np.int64)
    lost = np.zeros(n, dtype=bool)
    lost_at = np.full(n, -1, dtype=np.int64)
    history, cov_history, measurements, windows = [], [], [], []

    for k, volume in enumerate(cv_slices):
        state, cov = kalman.predict(state, cov)

        # measure: argmax restricted to the neighbourhood of the prediction
        slice_windows = volume.data[ys, xs]
        centres = slice_warp_positions(init_flow, xs, ys, k, T)
        positions = centres[:, None, :] + displacements[None, :, :]
        near = np.max(np.abs(positions - state[:, None, :2]), axis=-1) <= radius
        near[~near.any(axis=1)] = True
        masked = np.where(near, slice_windows, -np.inf)
        best = window_argmax(masked, radius)
        peak = slice_windows[np.arange(n), best]
        z = np.column_stack([positions[np.arange(n), best], peak])

        accepted = (peak >= c_min) & ~lost
        misses = np.where(accepted, 0, misses + 1)
        newly_lost = ~lost & (misses >= lost_after)
        lost_at[newly_lost] = k
        lost |= newly_lost
        if newly_lost.any():
            logger.debug(f"Slice {k}: {int(newly_lost.sum())} tracks lost")

        if accepted.any():
            state[accepted], cov[accepted] = kalman.update(state[accepted], cov[accepted], z[accepted])

        history.append(state.copy())
        cov_history.append(cov.copy())
        measurements.append(np.where(accepted[:, None], z, np.nan))
        windows.append(slice_windows.copy())

    if lost.all():
        raise LostTrack(f"all {n} tracks lost (peaks below {c_min})")

    tracks = []
    for i in range(n):
        tracks.append(MotionTrack(
            point_index=i,
            origin=(int(xs[i]), int(ys[i])),
            state=history[-1][i].copy(),
            covariance=cov_history[-1][i].copy(),
            history=[h[i].copy() for h in history],
            covariance_history=[c[i].copy() for c in cov_history],
            measurements=[None if np.isnan(m[i, 0]) else m[i].copy() for m in measurements],
            cv_temp_windows=[w[i] for w in windows],
            lost=bool(lost[i]),
            lost_at=int(lost_at[i]) if lost[i] else None,
        ))
    logger.info(f"Tracked {n} template points over {T} slices ({int(lost.sum())} lost)")
    return tracks


# ---------------------------------------------------------------------------
# Attention fusion
# ---------------------------------------------------------------------------

def attend(queries: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Single-head scaled dot-product attention with identity projections."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if queries.shape[0] == 0 or keys.shape[0] == 0:
        raise EmptyInput("attention needs at least one query and one key")
    if keys.shape[0] != values.shape[0] or queries.shape[1] != keys.shape[1]:
        raise DimensionMismatch(f"queries {queries.shape}, keys {keys.shape}, values {values.shape}")
    return attention_weights(queries, keys) @ values


def attention_weights(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """softmax_j(<q_i, k_j> / sqrt(d))."""
    return _softmax(queries @ keys.T / np.sqrt(keys.shape[1]))


def _softmax(scores: np.ndarray) -> np.ndarray:
    weights = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return weights / weights.sum(axis=-1, keepdims=True)


def _integer_shift(arr: np.ndarray, n: np.ndarray, axis: int) -> np.ndarray:
    """out[..., d] = arr[..., d - n] along one of the last two axes, zero outside."""
    side = arr.shape[axis]
    idx = np.arange(side) - n[..., None]
    valid = (idx >= 0) & (idx < side)
    idx = np.clip(idx, 0, side - 1)
    if axis == -1:
        idx, valid = idx[..., None, :], valid[..., None, :]
    else:
        idx, valid = idx[..., :, None], valid[..., :, None]
    gathered = np.take_along_axis(arr, np.broadcast_to(idx, arr.shape), axis=axis)
    return np.where(np.broadcast_to(valid, arr.shape), gathered, 0.0)


def shift_windows(windows: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """
    Translate (..., S, S) windows by (..., 2) shifts (dx, dy).

    out(d) = window(d - shift), bilinear, zero outside the window.
    """
    out = np.asarray(windows, dtype=np.float64)
    for axis, s in ((-1, shift[..., 0]), (-2, shift[..., 1])):
        whole = np.floor(s)
        frac = (s - whole)[..., None, None]
        n = whole.astype(np.int64)
        out = (1.0 - frac) * _integer_shift(out, n, axis) + frac * _integer_shift(out, n + 1, axis)
    return out


def cross_attention_fuse(q_windows: np.ndarray, cluster: ClusterResult, tracks: Sequence[MotionTrack],
                         event_volumes: Sequence[CorrelationVolume], tmpl: BoundaryTemplate,
                         use_clusters: bool = True, init_flow: Optional[FlowField] = None,
                         chunk_elements: int = 4_000_000) -> List[CorrelationVolume]:
    """
    Fuse frame structure into the per-slice event volumes at the tracked points.

    q_windows holds the frame window of every template point. For slice k,
    track i queries with its own frame window; keys and values are the
    slice-k event windows of the live tracks in its cluster (all live tracks
    when the cluster has no other or clustering is off). Each key window is
    shifted by (U_j - U_i)(k+1)/T so it reads in track i's frame. The
    attended window replaces the event window at track i's reference pixel;
    every other pixel keeps its event window.
    """
    q_windows = np.atleast_2d(np.asarray(q_windows, dtype=np.float64))
    live = [t for t in tracks if not t.lost]
    if q_windows.shape[0] == 0 or not live:
        raise EmptyInput("fusion needs frame queries and live tracks")
    if q_windows.shape[0] != len(tmpl):
        raise DimensionMismatch(f"{q_windows.shape[0]} query windows for {len(tmpl)} template points")
    T = len(event_volumes)
    if T != len(live[0].cv_temp_windows):
        raise DimensionMismatch("tracks and event volumes cover different slice counts")

    xs, ys = tmpl.xs, tmpl.ys
    index = np.array([t.point_index for t in live], dtype=np.int64)
    px, py = xs[index], ys[index]
    groups = cluster.assignments[py, px] if use_clusters else np.zeros(len(live), dtype=np.int64)
    if init_flow is None:
        motion = np.zeros((len(live), 2))
    else:
        motion = np.stack([init_flow.u[py, px], init_flow.v[py, px]], axis=-1)
    queries = q_windows[index]
    side = 2 * event_volumes[0].radius + 1
    width = event_volumes[0].width
    pixels = py * width + px

    fused = []
    for k, volume in enumerate(event_volumes):
        frac = (k + 1) / T
        keys_all = np.stack([t.cv_temp_windows[k] for t in live])
        out = volume.data.reshape(-1, volume.window_size).copy()
        for group in np.unique(groups):
            members = np.nonzero(groups == group)[0]
            pool = members if members.size > 1 else np.arange(len(live))
            keys = keys_all[pool].reshape(-1, side, side)
            step = max(1, chunk_elements // max(1, pool.size * volume.window_size))
            for start in range(0, members.size, step):
                rows = members[start:start + step]
                shift = (motion[pool][None, :, :] - motion[rows][:, None, :]) * frac
                aligned = shift_windows(np.broadcast_to(keys, (rows.size,) + keys.shape), shift)
                aligned = aligned.reshape(rows.size, pool.size, -1)
                scores = np.einsum("qd,qmd->qm", queries[rows], aligned) / np.sqrt(aligned.shape[-1])
                out[pixels[rows]] = np.einsum("qm,qmd->qd", _softmax(scores), aligned)
        fused.append(CorrelationVolume(data=out.reshape(volume.data.shape), radius=volume.radius))
    logger.info(f"Fused {len(fused)} slice volumes at {len(live)} tracked points "
                f"({len(np.unique(groups))} key groups)")
    return fused


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def _paired_sum(arr: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the first window axis, adding +j and -j rows as pairs so mirrored inputs sum identically."""
    total = arr[..., radius, :].copy()
    for j in range(1, radius + 1):
        total += arr[..., radius + j, :] + arr[..., radius - j, :]
    return total


def decode_flow(cv: CorrelationVolume, temperature: float = 0.1) -> FlowField:
    """
    Soft-argmax: expected displacement under softmax(cv / temperature).

    Mirrored window entries are combined pairwise, so a point-symmetric
    window decodes to exactly (0, 0).
    """
    if temperature <= 0:
        raise InvalidArgument(f"temperature must be > 0, got {temperature}")
    r = cv.radius
    side = 2 * r + 1
    logits = cv.data / temperature
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits).reshape(cv.height, cv.width, side, side)   # [..., dy, dx]

    col_mass = _paired_sum(w, r)                                  # per dx, summed over dy
    row_mass = _paired_sum(np.swapaxes(w, -1, -2), r)             # per dy, summed over dx
    total = col_mass[..., r].copy()
    for j in range(1, r + 1):
        total += col_mass[..., r + j] + col_mass[..., r - j]

    u = np.zeros((cv.height, cv.width))
    v = np.zeros((cv.height, cv.width))
    for j in range(1, r + 1):
        u += j * (col_mass[..., r + j] - col_mass[..., r - j])
        v += j * (row_mass[..., r + j] - row_mass[..., r - j])
    return FlowField(u=u / total, v=v / total)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def corr_spatial_loss(cv_t0: CorrelationVolume, cluster: ClusterResult, tmpl: BoundaryTemplate) -> float:
    """Mean over template points of the L1 distance between cv and cv_spa windows."""
    if len(tmpl) == 0:
        raise EmptyTemplate("spatial loss needs a non-empty template")
    if cv_t0.data.shape != cluster.cv_spa.data.shape:
        raise DimensionMismatch("cv and cv_spa differ in shape")
    xs, ys = tmpl.xs, tmpl.ys
    diff = np.abs(cv_t0.data[ys, xs] - cluster.cv_spa.data[ys, xs])
    return float(diff.sum(axis=-1).mean())


def track_peak_persistence(tracks: Sequence[MotionTrack], level: float = 0.5) -> float:
    """Mean share of slices in which a live track's window peak reaches level."""
    live = [t for t in tracks if not t.lost and t.cv_temp_windows]
    if not live:
        return 0.0
    return float(np.mean([np.mean([w.max() >= level for w in t.cv_temp_windows]) for t in live]))


def corr_temporal_loss(cv_slices: Sequence[CorrelationVolume], tracks: Sequence[MotionTrack]) -> float:
    """
    Mean over slices (and tracks) of the L1 distance between the volume
    window at each track's reference pixel and the window recorded while tracking.
    """
    if not tracks:
        raise NoTracks("temporal loss needs at least one track")
    T = len(cv_slices)
    if any(len(t.cv_temp_windows) != T for t in tracks):
        raise DimensionMismatch("tracks and volumes cover different slice counts")
    xs = np.array([t.origin[0] for t in tracks])
    ys = np.array([t.origin[1] for t in tracks])
    per_slice = []
    for k, volume in enumerate(cv_slices):
        recorded = np.stack([t.cv_temp_windows[k] for t in tracks])
        per_slice.append(np.abs(volume.data[ys, xs] - recorded).sum(axis=-1).mean())
    return float(np.mean(per_slice))


def flow_consistency_loss(flows_fused: np.ndarray, flow_frame: FlowField, flows_event: np.ndarray,
                          xs: np.ndarray, ys: np.ndarray) -> float:
    """
    Accumulated fused motion against the frame flow, plus per-slice agreement
    with the event flows, all at the template points.

    flows_fused, flows_event: (T, N, 2) per-slice displacements of N points.
    """
    flows_fused = np.asarray(flows_fused, dtype=np.float64)
    flows_event = np.asarray(flows_event, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    if flows_fused.shape != flows_event.shape or flows_fused.ndim != 3 or flows_fused.shape[2] != 2:
        raise DimensionMismatch(f"fused {flows_fused.shape} vs event {flows_event.shape}")
    if flows_fused.shape[1] != xs.shape[0] or xs.shape != ys.shape:
        raise DimensionMismatch("flows and points disagree on the number of points")
    if flows_fused.shape[1] == 0:
        raise EmptyInput("consistency loss needs at least one point")

    accumulated = compose_points(flows_fused)
    frame = flow_frame.at(xs, ys)
    accumulation_term = np.abs(accumulated - frame).sum(axis=-1).mean()
    slice_term = np.abs(flows_fused - flows_event).sum(axis=-1).mean(axis=-1).sum()
    return float(accumulation_term + slice_term)
