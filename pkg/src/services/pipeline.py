#!/usr/bin/env python3
"""
Pipeline Service
Orchestrates the two sub-modules (visual boundary localization, motion
correlation fusion) over a scene bundle and writes every intermediate
artifact. Each CLI subcommand maps onto one public method.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from src.config.app_config import PipelineConfig
from src.core.errors import ConfigError, EmptyTemplate, LostTrack, StageError
from src.core.models import (
    BoundaryMap,
    BoundaryTemplate,
    ClusterResult,
    CorrelationVolume,
    Distribution,
    FeatureMap,
    FlowField,
    GradientMap,
    Image,
    LossReport,
    MetricsReport,
    MotionTrack,
    RefinementResult,
    SceneSpec,
    SynthBundle,
)
from src.core.repositories import IBundleRepository
from src.services import boundary as bnd
from src.services import correlation as corr
from src.services import evaluation as ev
from src.services import fusion as fus
from src.services import gradient as grad
from src.services import optim
from src.services import synth
from src.services.event_io import accumulate_polarity
from src.services.ports import IPipelineService
from src.services.tabular_processor import TabularProcessor

logger = logging.getLogger(__name__)


@dataclass
class FrameStage:
    """
    Frame-side motion estimate U.

    The frames may span less than the event window once frames are dropped;
    window_scale maps the frame-interval flow onto the full window.
    """
    i0: Image
    i1: Image
    frame_only: FlowField                  # decoded frame volume, before refinement
    refinement: RefinementResult
    window_scale: float = 1.0

    @property
    def frame_flow(self) -> FlowField:
        """Refined flow between i0 and i1."""
        return self.refinement.flow

    @property
    def flow(self) -> FlowField:
        """U over the event window."""
        if self.window_scale == 1.0:
            return self.refinement.flow
        return self.refinement.flow.scaled(self.window_scale)


@dataclass
class BoundaryStage:
    gf: GradientMap
    ge: GradientMap
    bf: BoundaryMap
    be: BoundaryMap
    common_bf: BoundaryMap                 # |gradient| cut in the common space
    common_be: BoundaryMap
    grad_dist: Distribution
    boundary_dist: Distribution
    prob_map: np.ndarray
    template: BoundaryTemplate
    kl: float
    entropy: float


@dataclass
class FusionStage:
    cv_frame: CorrelationVolume
    event_volumes: List[CorrelationVolume]
    cluster: ClusterResult
    tracks: List[MotionTrack]
    fused: List[CorrelationVolume]
    slice_flows: List[FlowField]           # fused per-slice trajectory increments
    positions: np.ndarray                  # (H, W, T, 2) fused trajectory of every pixel
    reconstructed_end: Image
    spa: float
    temp: float
    consis: float
    features: Optional[np.ndarray] = None  # (H, W, D) clustering features
    extras: Dict[str, float] = field(default_factory=dict)

    @property
    def total_flow(self) -> FlowField:
        return total_flow(self.positions)


def scene_spec(config: PipelineConfig) -> SceneSpec:
    return SceneSpec(
        width=config.width, height=config.height, texture=config.texture, seed=config.seed,
        ramp_slope=config.ramp_slope, ramp_offset=config.ramp_offset, motion=config.motion,
        motion_u=config.motion_u, motion_v=config.motion_v,
        motion_u2=config.motion_u2, motion_v2=config.motion_v2, rotation=config.rotation,
        T=config.T, duration=config.duration, C=config.C,
        n_frames=config.n_frames, substeps=config.substeps,
    )


def window_scale(bundle: SynthBundle) -> float:
    """Event-window length over the span of the first and last kept frame."""
    frames = bundle.frames.frames
    span = float(frames[-1].t) - float(frames[0].t)
    window = float(bundle.slices[-1].t_end) - float(bundle.slices[0].t_start)
    if span <= 0 or window <= 0:
        return 1.0
    return window / span


def trajectories(init_flow: FlowField, residuals: Sequence[FlowField]) -> np.ndarray:
    """
    (H, W, T, 2) positions x + U(k+1)/T + r_k of every reference pixel.

    residuals[k] is the decoded displacement of slice k around its warp centre.
    """
    T = len(residuals)
    xs, ys = np.meshgrid(np.arange(init_flow.width, dtype=np.float64),
                         np.arange(init_flow.height, dtype=np.float64))
    positions = np.empty((init_flow.height, init_flow.width, T, 2))
    for k, r in enumerate(residuals):
        frac = (k + 1) / T
        positions[:, :, k, 0] = xs + init_flow.u * frac + r.u
        positions[:, :, k, 1] = ys + init_flow.v * frac + r.v
    return positions


def increments(positions: np.ndarray) -> List[FlowField]:
    """Per-slice flows P_k - P_{k-1} with P_{-1} the reference pixel."""
    height, width = positions.shape[:2]
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    previous = np.stack([xs, ys], axis=-1)
    flows = []
    for k in range(positions.shape[2]):
        current = positions[:, :, k]
        flows.append(FlowField(u=current[..., 0] - previous[..., 0], v=current[..., 1] - previous[..., 1]))
        previous = current
    return flows


def total_flow(positions: np.ndarray) -> FlowField:
    """Window flow P_{T-1} - x; equals the sum of the per-slice increments."""
    height, width = positions.shape[:2]
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return FlowField(u=positions[:, :, -1, 0] - xs, v=positions[:, :, -1, 1] - ys)


class PipelineService(IPipelineService):
    """
    Implements every pipeline stage on top of the pure service modules.
    Depends only on the IBundleRepository port for artifact storage.
    """

    def __init__(self, repository: IBundleRepository, workers: int = 1):
        self._repository = repository
        self._workers = max(1, int(workers))

    # ------------------------------------------------------------------
    # plumbing
    # ------------------------------------------------------------------

    @contextmanager
    def _stage(self, name: str):
        logger.info(f"Stage {name}: start")
        try:
            yield
        except (StageError, ConfigError):
            raise
        except Exception as e:
            logger.error(f"Stage {name} failed: {e}")
            raise StageError(name, e) from e
        logger.info(f"Stage {name}: done")

    def _map(self, fn: Callable, items: Sequence) -> list:
        """Order-preserving map over slices, capped at the configured worker count."""
        if self._workers == 1 or len(items) < 2:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self._workers) as pool:
            return list(pool.map(fn, items))

    @staticmethod
    def _out(config: PipelineConfig) -> Path:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        return out

    def _bundle(self, config: PipelineConfig) -> SynthBundle:
        """Load the input bundle (or synthesize one), then apply blur and frame dropping."""
        with self._stage("load"):
            if config.input:
                bundle = self._repository.load_bundle(Path(config.input))
            else:
                bundle = synth.gen_scene(scene_spec(config))
            bundle = synth.degrade(bundle, config.blur_len, config.drop)
            if len(bundle.frames) < 2:
                raise ValueError(f"only {len(bundle.frames)} frame left after drop={config.drop}; "
                                 f"need at least 2")
        return bundle

    # ------------------------------------------------------------------
    # stages
    # ------------------------------------------------------------------

    def _frame_stage(self, config: PipelineConfig, bundle: SynthBundle,
                     init_flow: Optional[FlowField] = None) -> FrameStage:
        with self._stage("refine"):
            # 1. Reference and end frames
            i0, i1 = bundle.frames.frames[0], bundle.frames.frames[-1]
            scale = window_scale(bundle)

            # 2. Frame-only estimate from the zero-centred frame volume
            if init_flow is None:
                f0 = corr.extract_features(i0, config.levels)
                f1 = corr.extract_features(i1, config.levels)
                zero = FlowField.zeros(i0.width, i0.height)
                frame_only = fus.decode_flow(corr.build_correlation(f0, f1, zero, config.radius),
                                             config.temperature)
                # 3. Photometric refinement gives U
                refinement = optim.refine_flow(i0, i1, frame_only, config.refine_steps,
                                               config.refine_lr, config.p, config.eps)
            else:
                # init_flow spans the event window
                frame_only = init_flow.scaled(1.0 / scale) if scale != 1.0 else init_flow
                refinement = optim.refine_flow(i0, i1, frame_only, 0, config.refine_lr, config.p, config.eps)
        if scale != 1.0:
            logger.info(f"Frames cover 1/{scale:.3f} of the event window; scaling U accordingly")
        return FrameStage(i0=i0, i1=i1, frame_only=frame_only, refinement=refinement, window_scale=scale)

    def _boundary_stage(self, config: PipelineConfig, bundle: SynthBundle, frame: FrameStage,
                        template: Optional[BoundaryTemplate] = None) -> BoundaryStage:
        U = frame.flow
        with self._stage("gradients"):
            gf = grad.frame_temporal_gradient(frame.i0, U)
            ge = grad.event_temporal_gradient(bundle.slices, U, bundle.spec.C)

            # 1. Both modalities in the common space, cut at one event-side threshold
            gf_c = grad.smooth_gradient(gf, config.common_sigma)
            ge_c = grad.smooth_gradient(ge, config.common_sigma)
            threshold = float(np.mean(np.abs(ge_c.data)))
            common_bf = bnd.gradient_boundary(gf_c, threshold)
            common_be = bnd.gradient_boundary(ge_c, threshold)

            hist_range = (config.hist_lo, config.hist_hi)
            grad_dist = grad.make_distribution(
                grad.relative_similarity(gf_c, ge_c, config.win, config.stride), config.hist_bins, hist_range)

        with self._stage("boundary"):
            # 2. Boundary maps of both modalities
            bf = bnd.canny(frame.i0, config.canny_sigma, config.canny_lo, config.canny_hi)
            be = bnd.project_events_boundary(bundle.slices[len(bundle.slices) // 2], config.n_min)

            # 3. Boundary distribution pulled towards the gradient distribution
            boundary_dist = grad.make_distribution(
                bnd.boundary_patch_distances(common_bf, common_be, config.win, config.stride),
                config.hist_bins, hist_range)
            kl = bnd.kl_divergence(boundary_dist, grad_dist)

            # 4. Probability map and template
            prob_map = bnd.boundary_probability(bf, be, config.win, config.stride, config.tau, gf, ge)
            if template is None:
                template = self._template(config, bf, be, prob_map)

            # 5. Class distribution against the degradation labels
            xs, ys = template.xs, template.ys
            labels = bnd.classify_boundary(synth.boundary_degradation_probability(bundle)[ys, xs], config.K)
            probs = np.array([pt.probability for pt in template.points])
            entropy = bnd.cross_entropy(bnd.soft_class_distribution(probs, config.K), labels)

        logger.info(f"Phase 1 structures: KL {kl:.4f}, cross-entropy {entropy:.4f}, "
                    f"template {len(template)} points")
        return BoundaryStage(gf=gf, ge=ge, bf=bf, be=be, common_bf=common_bf, common_be=common_be,
                             grad_dist=grad_dist, boundary_dist=boundary_dist,
                             prob_map=prob_map, template=template, kl=kl, entropy=entropy)

    @staticmethod
    def _template(config: PipelineConfig, bf: BoundaryMap, be: BoundaryMap, prob_map: np.ndarray) -> BoundaryTemplate:
        try:
            return bnd.build_template(bf, be, prob_map, config.template_threshold, config.K)
        except EmptyTemplate:
            # keep the best-preserved boundary points relative to the strongest one
            best = float(prob_map.max())
            if best <= 0:
                raise
            relaxed = 0.5 * best
            logger.warning(f"No boundary point reaches probability {config.template_threshold}; "
                           f"relaxing the template threshold to {relaxed:.4f}")
            return bnd.build_template(bf, be, prob_map, relaxed, config.K)

    def _event_volumes(self, config: PipelineConfig, bundle: SynthBundle, frame: FrameStage,
                       f_ref: FeatureMap):
        """Per-slice volumes between the reference frame and the event-reconstructed slice ends."""
        T = len(bundle.slices)
        increments_ = [accumulate_polarity(s, bundle.spec.C).data for s in bundle.slices]
        levels = np.cumsum(increments_, axis=0)
        ends = [Image(data=np.clip(frame.i0.data + levels[k], 0.0, 1.0), t=float(bundle.slices[k].t_end))
                for k in range(T)]

        def _volume(k: int) -> CorrelationVolume:
            f_k = corr.extract_features(ends[k], config.levels)
            return corr.build_correlation(f_ref, f_k, frame.flow.scaled((k + 1) / T), config.radius)

        return self._map(_volume, list(range(T))), ends[-1]

    def _signal_volumes(self, config: PipelineConfig, bundle: SynthBundle, frame: FrameStage) -> List[CorrelationVolume]:
        """Per-slice volumes over the event signal alone: smoothed slice counts along U."""
        T = len(bundle.slices)
        ones = FeatureMap(data=np.ones((1, bundle.spec.height, bundle.spec.width)))

        def _volume(k: int) -> CorrelationVolume:
            signal = corr.event_signal_features(bundle.slices[k], config.common_sigma)
            return corr.build_correlation(ones, signal, frame.flow.scaled((k + 1) / T), config.radius)

        return self._map(_volume, list(range(T)))

    def _visual_volumes(self, config: PipelineConfig, frame: FrameStage, f_ref: FeatureMap,
                        f_end: FeatureMap, T: int) -> List[CorrelationVolume]:
        """Per-slice volumes against frame features interpolated linearly in time."""

        def _volume(k: int) -> CorrelationVolume:
            frac = (k + 1) / T
            blended = corr.blend_features(f_ref, f_end, min(1.0, frac * frame.window_scale))
            return corr.build_correlation(f_ref, blended, frame.flow.scaled(frac), config.radius)

        return self._map(_volume, list(range(T)))

    def _cluster(self, config: PipelineConfig, cv_frame: CorrelationVolume, features: np.ndarray,
                 template: BoundaryTemplate, strategy: Optional[str] = None) -> ClusterResult:
        return fus.cluster_pixels(strategy or config.cluster_strategy, cv_frame, template,
                                  min(config.kmeans_k, len(template)), config.kmeans_alpha,
                                  config.kmeans_tol, config.kmeans_max_iter, config.seed,
                                  config.kmeans_init, features, config.dbscan_min_samples)

    def _track(self, config: PipelineConfig, volumes: Sequence[CorrelationVolume], template: BoundaryTemplate,
               U: FlowField) -> List[MotionTrack]:
        return fus.temporal_track(volumes, template, U, np.diag(config.ekf_q), np.diag(config.ekf_r),
                                  config.c_min, config.lost_after)

    def _fuse(self, cv_frame: CorrelationVolume, cluster: ClusterResult, tracks: Sequence[MotionTrack],
              volumes: Sequence[CorrelationVolume], template: BoundaryTemplate, U: FlowField,
              use_clusters: bool = True) -> List[CorrelationVolume]:
        queries = cv_frame.data[template.ys, template.xs]
        return fus.cross_attention_fuse(queries, cluster, tracks, volumes, template, use_clusters, init_flow=U)

    def _decode(self, config: PipelineConfig, U: FlowField, volumes: Sequence[CorrelationVolume]) -> np.ndarray:
        residuals = self._map(lambda cv: fus.decode_flow(cv, config.temperature), volumes)
        return trajectories(U, residuals)

    def _fusion_stage(self, config: PipelineConfig, bundle: SynthBundle, frame: FrameStage,
                      template: BoundaryTemplate, use_clusters: bool = True) -> FusionStage:
        U = frame.flow
        T = len(bundle.slices)
        with self._stage("correlation"):
            f_ref = corr.extract_features(frame.i0, config.levels)
            f_end = corr.extract_features(frame.i1, config.levels)
            cv_frame = corr.build_correlation(f_ref, f_end, frame.frame_flow, config.radius)
            event_volumes, reconstructed_end = self._event_volumes(config, bundle, frame, f_ref)
            # zero-centred, so the peaks carry the motion itself
            zero = FlowField.zeros(frame.i0.width, frame.i0.height)
            features = fus.motion_features(corr.build_correlation(f_ref, f_end, zero, config.radius),
                                           config.temperature, config.cluster_smooth)

        with self._stage("fusion"):
            # 1. Spatial matching on the frame motion
            cluster = self._cluster(config, cv_frame, features, template)

            # 2. Temporal tracking through the event volumes
            tracks = self._track(config, event_volumes, template, U)

            # 3. Cross-attention between frame windows and tracked event windows
            xs, ys = template.xs, template.ys
            fused = self._fuse(cv_frame, cluster, tracks, event_volumes, template, U, use_clusters)

            # 4. Decode and accumulate
            positions = self._decode(config, U, fused)
            slice_flows = increments(positions)

            # 5. Phase-2 losses
            spa = fus.corr_spatial_loss(fused[0], cluster, template)
            temp = fus.corr_temporal_loss(fused, tracks)
            fused_points = np.stack([f.at(xs, ys) for f in slice_flows])
            track_positions = np.stack([t.positions for t in tracks], axis=1)          # (T, N, 2)
            origins = np.stack([xs, ys], axis=-1).astype(np.float64)
            event_points = np.diff(np.concatenate([origins[None], track_positions]), axis=0)
            consis = fus.flow_consistency_loss(fused_points, U, event_points, xs, ys)

            extras = {
                "frame_peak_fraction": corr.peak_fraction(cv_frame),
                "event_peak_fraction": max(corr.peak_fraction(v) for v in event_volumes),
                "track_peak_persistence": fus.track_peak_persistence(tracks),
            }

        logger.info(f"Phase 2 structures: {T} slices, {len(tracks)} tracks, "
                    f"{len(cluster.anchors)} clusters in {cluster.n_iter} iterations")
        return FusionStage(cv_frame=cv_frame, event_volumes=event_volumes, cluster=cluster, tracks=tracks,
                           fused=fused, slice_flows=slice_flows, positions=positions,
                           reconstructed_end=reconstructed_end, spa=spa, temp=temp, consis=consis,
                           features=features, extras=extras)

    # ------------------------------------------------------------------
    # artifact writers
    # ------------------------------------------------------------------

    def _write_boundary(self, out: Path, stage: BoundaryStage) -> None:
        self._repository.save_image(stage.bf.data, out / "boundary_frame.png")
        self._repository.save_image(stage.be.data, out / "boundary_event.png")
        self._repository.save_flow(FlowField(u=stage.prob_map, v=np.zeros_like(stage.prob_map)),
                                   out / "boundary_prob.stfl")
        TabularProcessor.write_csv(TabularProcessor.template_table(stage.template), out / "template.csv")

    def _write_gradients(self, out: Path, stage: BoundaryStage) -> None:
        for name, gmap in (("gradient_frame", stage.gf), ("gradient_event", stage.ge)):
            self._repository.save_flow(FlowField(u=gmap.data, v=np.zeros_like(gmap.data)), out / f"{name}.stfl")
        for name, bmap in (("boundary_common_frame", stage.common_bf), ("boundary_common_event", stage.common_be)):
            self._repository.save_image(bmap.data, out / f"{name}.png")
        table = TabularProcessor.histogram_table({"gradient": stage.grad_dist, "boundary": stage.boundary_dist})
        TabularProcessor.write_csv(table, out / "histograms.csv")

    def _write_fusion(self, out: Path, stage: FusionStage) -> None:
        for k, flow in enumerate(stage.slice_flows):
            self._repository.save_flow(flow, out / "fused_slices" / f"slice_{k:03d}.stfl")
        self._repository.save_flow(stage.total_flow, out / "fused_flow.stfl")
        TabularProcessor.write_csv(TabularProcessor.track_table(stage.tracks), out / "tracks.csv")

    def _write_refinement(self, out: Path, frame: FrameStage) -> None:
        self._repository.save_flow(frame.frame_only, out / "frame_flow.stfl")
        self._repository.save_flow(frame.frame_flow, out / "refined_flow.stfl")
        TabularProcessor.write_csv(TabularProcessor.series_table("loss", frame.refinement.loss_history),
                                   out / "refine_history.csv")

    # ------------------------------------------------------------------
    # public operations
    # ------------------------------------------------------------------

    def synth(self, config: PipelineConfig) -> Path:
        with self._stage("synth"):
            bundle = synth.gen_scene(scene_spec(config))
            return self._repository.save_bundle(bundle, self._out(config))

    def gradients(self, config: PipelineConfig, sweep_blur: Optional[List[int]] = None) -> Path:
        out = self._out(config)
        bundle = self._bundle(config)
        frame = self._frame_stage(config, bundle)
        stage = self._boundary_stage(config, bundle, frame)
        with self._stage("write"):
            self._write_gradients(out, stage)
        if sweep_blur:
            rows = []
            for blur_len in sweep_blur:
                kl = self.kl_for_blur(config, blur_len)
                rows.append({"blur_len": blur_len, "kl": kl})
            with self._stage("write"):
                TabularProcessor.write_csv(TabularProcessor.sweep_table(rows), out / "kl_sweep.csv")
        return out

    def kl_for_blur(self, config: PipelineConfig, blur_len: int) -> float:
        """KL between boundary and gradient patch distributions with the frames blurred over blur_len slices."""
        swept = config.with_overrides({"blur_len": str(blur_len)})
        bundle = self._bundle(swept)
        frame = self._frame_stage(swept, bundle, init_flow=bundle.gt_flow_total)
        stage = self._boundary_stage(swept, bundle, frame)
        logger.info(f"blur_len={blur_len}: KL {stage.kl:.6f}")
        return stage.kl

    def boundary(self, config: PipelineConfig) -> Path:
        out = self._out(config)
        bundle = self._bundle(config)
        frame = self._frame_stage(config, bundle)
        stage = self._boundary_stage(config, bundle, frame)
        with self._stage("write"):
            self._write_boundary(out, stage)
        return out

    def refine(self, config: PipelineConfig) -> Path:
        out = self._out(config)
        bundle = self._bundle(config)
        frame = self._frame_stage(config, bundle)
        with self._stage("write"):
            self._write_refinement(out, frame)
        return out

    def fuse(self, config: PipelineConfig, init_flow: Optional[Path] = None,
             template: Optional[Path] = None) -> Path:
        out = self._out(config)
        bundle = self._bundle(config)
        with self._stage("load"):
            flow = self._repository.load_flow(init_flow) if init_flow else None
            tmpl = TabularProcessor.read_template(Path(template).read_bytes()) if template else None
        frame = self._frame_stage(config, bundle, init_flow=flow)
        stage = self._boundary_stage(config, bundle, frame, template=tmpl)
        fusion = self._fusion_stage(config, bundle, frame, stage.template, config.clustering)
        report = self._losses(config, frame, stage, fusion)
        with self._stage("write"):
            self._write_fusion(out, fusion)
            TabularProcessor.write_csv(TabularProcessor.loss_table(report, fusion.extras), out / "losses.csv")
        return out

    def gradcheck(self, config: PipelineConfig, instances: int = 1) -> float:
        with self._stage("gradcheck"):
            worst = 0.0
            for index in range(instances):
                i0, i1, flow = optim.random_gradcheck_instance(config.seed + index)
                worst = max(worst, optim.gradcheck(i0, i1, flow, config.p, config.eps))
        return worst

    def evaluate(self, pred: Path, gt: Path, mask: Optional[Path] = None) -> MetricsReport:
        with self._stage("eval"):
            flow = self._repository.load_flow(pred)
            truth = self._repository.load_flow(gt)
            valid = self._repository.load_mask(mask, truth.shape) if mask else None
            return ev.metrics_report(flow, truth, valid)

    def visualize(self, flow: Path, max_mag: Optional[float], out: Path) -> Path:
        with self._stage("viz"):
            field_ = self._repository.load_flow(flow)
            if max_mag is None:
                max_mag = max(1.0, float(np.hypot(field_.u, field_.v).max()))
            self._repository.save_image(ev.flow_to_color(field_, max_mag), out)
        return Path(out)

    def _losses(self, config: PipelineConfig, frame: FrameStage, stage: BoundaryStage,
                fusion: FusionStage) -> LossReport:
        with self._stage("losses"):
            pho = optim.photometric_loss(frame.i0, frame.i1, frame.frame_flow, p=config.p, eps=config.eps)
            report = optim.total_loss(pho, stage.kl, stage.entropy, fusion.spa, fusion.temp,
                                      fusion.consis, config.lambdas)
            fusion.extras["pho_event"] = optim.photometric_loss(
                frame.i0, fusion.reconstructed_end, fusion.total_flow, p=config.p, eps=config.eps)
        logger.info(f"Objective: total {report.total:.4f} (pho {report.pho:.4f}, kl {report.kl:.4f}, "
                    f"entropy {report.entropy:.4f}, spa {report.spa:.4f}, temp {report.temp:.4f}, "
                    f"consis {report.consis:.4f})")
        return report

    def run_pipeline(self, config: PipelineConfig) -> MetricsReport:
        """
        Full run: load or synthesize, refine U, phase-1 boundary structures,
        correlation volumes, fusion, phase-2 losses and metrics.
        """
        out = self._out(config)
        (out / "config.txt").write_text(config.to_text())

        # 1. Input
        bundle = self._bundle(config)
        if not config.input:
            with self._stage("write"):
                self._repository.save_bundle(bundle, out / "bundle")

        # 2. Frame-side flow and phase-1 structures
        frame = self._frame_stage(config, bundle)
        stage = self._boundary_stage(config, bundle, frame)

        # 3. Fusion and phase-2 structures
        fusion = self._fusion_stage(config, bundle, frame, stage.template, config.clustering)
        report = self._losses(config, frame, stage, fusion)

        # 4. Metrics
        with self._stage("eval"):
            xs, ys = stage.template.xs, stage.template.ys
            if bundle.gt_tracks is not None:
                gt_tracks = bundle.gt_tracks[ys * bundle.spec.width + xs]
            else:
                gt_tracks = synth.ground_truth_tracks(bundle.spec, xs, ys)
            metrics = ev.metrics_report(fusion.total_flow, bundle.gt_flow_total,
                                        positions=fusion.positions[ys, xs], gt_tracks=gt_tracks)

        # 5. Artifacts
        with self._stage("write"):
            self._write_refinement(out, frame)
            self._write_gradients(out, stage)
            self._write_boundary(out, stage)
            self._write_fusion(out, fusion)
            max_mag = max(1.0, float(np.hypot(bundle.gt_flow_total.u, bundle.gt_flow_total.v).max()))
            self._repository.save_image(ev.flow_to_color(fusion.total_flow, max_mag), out / "fused_flow.png")
            TabularProcessor.write_csv(TabularProcessor.loss_table(report, fusion.extras), out / "losses.csv")
            TabularProcessor.write_csv(TabularProcessor.metrics_table(metrics), out / "metrics.csv")

        if config.ablations:
            self.ablation(config, bundle, frame, stage, fusion, gt_tracks, out)
        return metrics

    def ablation(self, config: PipelineConfig, bundle: SynthBundle, frame: FrameStage,
                 stage: BoundaryStage, fusion: FusionStage, gt_tracks: np.ndarray, out: Path) -> List[Dict]:
        """
        Compare frame-only and event-only estimates with the full fusion and
        with one part of it swapped out: no clustering, another clustering
        strategy, another tracking target, or a grid template instead of the
        common-space boundary template.
        """
        with self._stage("ablation"):
            T = len(bundle.slices)
            tmpl = stage.template
            xs, ys = tmpl.xs, tmpl.ys
            gt = bundle.gt_flow_total
            U = frame.flow
            zero = [FlowField.zeros(gt.width, gt.height) for _ in range(T)]
            volumes = fusion.event_volumes

            def _fused(cluster: ClusterResult, tracks: Sequence[MotionTrack], template: BoundaryTemplate,
                       use_clusters: bool = True) -> np.ndarray:
                fused = self._fuse(fusion.cv_frame, cluster, tracks, volumes, template, U, use_clusters)
                return self._decode(config, U, fused)

            variants = {
                # U spread linearly over the window
                "frame_only": trajectories(U, zero),
                # event volumes decoded without attention
                "event_only": self._decode(config, U, volumes),
                "common_fusion": fusion.positions,
                "fusion_no_clustering": _fused(fusion.cluster, fusion.tracks, tmpl, use_clusters=False),
            }
            for strategy in ("gmm", "dbscan"):
                cluster = self._cluster(config, fusion.cv_frame, fusion.features, tmpl, strategy)
                variants[f"cluster_{strategy}"] = _fused(cluster, fusion.tracks, tmpl)

            f_ref = corr.extract_features(frame.i0, config.levels)
            f_end = corr.extract_features(frame.i1, config.levels)
            targets = (("track_event_signal", self._signal_volumes(config, bundle, frame)),
                       ("track_visual_feature", self._visual_volumes(config, frame, f_ref, f_end, T)))
            for name, target in targets:
                try:
                    tracks = self._track(config, target, tmpl, U)
                except LostTrack as e:
                    logger.warning(f"Ablation {name}: {e}; falling back to the event-volume tracks")
                    tracks = fusion.tracks
                variants[name] = _fused(fusion.cluster, tracks, tmpl)

            grid = bnd.grid_template(gt.width, gt.height, config.stride)
            grid_cluster = self._cluster(config, fusion.cv_frame, fusion.features, grid)
            variants["no_common_space"] = _fused(grid_cluster, self._track(config, volumes, grid, U), grid)

            rows = []
            for name, positions in variants.items():
                total = total_flow(positions)
                rows.append({"variant": name, "epe": ev.epe(total, gt), "f1_all": ev.f1_all(total, gt),
                             "tepe": ev.trajectory_error(positions[ys, xs], gt_tracks)})
            TabularProcessor.write_csv(TabularProcessor.ablation_table(rows), out / "ablation.csv")
        for row in rows:
            logger.info(f"Ablation {row['variant']}: EPE {row['epe']:.4f}, TEPE {row['tepe']:.4f}")
        return rows
