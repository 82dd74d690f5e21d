"""Stage-level tests of the pipeline service on synthetic scenes."""

import numpy as np
import pandas as pd
import pytest

from src.adapters.dependencies import get_pipeline_service
from src.config.app_config import load_pipeline_config
from src.core.models import FlowField


@pytest.fixture
def service():
    return get_pipeline_service(workers=1)


def _config(tmp_path, **overrides):
    return load_pipeline_config(overrides={key: str(value) for key, value in overrides.items()},
                                out=str(tmp_path / "out"))


class TestFrameStage:

    def test_dropped_frames_scale_u_to_the_event_window(self, tmp_path, service):
        config = _config(tmp_path, n_frames=4, drop=2, blur_len=1, width=64, height=64)
        bundle = service._bundle(config)
        frame = service._frame_stage(config, bundle)
        assert frame.window_scale == pytest.approx(1.5)
        np.testing.assert_allclose(frame.flow.u, 1.5 * frame.frame_flow.u)
        assert float(np.median(frame.flow.u)) > 2.4

    def test_all_frames_kept_means_no_scaling(self, tmp_path, service):
        config = _config(tmp_path, n_frames=3, drop=1, blur_len=1, width=32, height=32, T=4, substeps=20)
        frame = service._frame_stage(config, service._bundle(config))
        assert frame.window_scale == pytest.approx(1.0)
        np.testing.assert_array_equal(frame.flow.u, frame.frame_flow.u)

    def test_window_init_flow_is_brought_to_the_frame_interval(self, tmp_path, service):
        config = _config(tmp_path, n_frames=4, drop=2, blur_len=1, width=32, height=32, T=4, substeps=20)
        bundle = service._bundle(config)
        frame = service._frame_stage(config, bundle, init_flow=FlowField.constant(32, 32, 3.0, 0.0))
        np.testing.assert_allclose(frame.frame_flow.u, 2.0)
        np.testing.assert_allclose(frame.flow.u, 3.0)


class TestCommonSpaceKl:

    def test_kl_falls_as_the_blur_shrinks(self, tmp_path, service):
        config = _config(tmp_path, width=64, height=64, texture="noise", motion_u=24, motion_v=0,
                         win=16, stride=4, hist_bins=8, hist_lo=0, hist_hi=1)
        kls = [service.kl_for_blur(config, blur_len) for blur_len in (8, 4, 1)]
        assert kls[0] > kls[1] > kls[2]

    def test_common_boundaries_share_one_threshold(self, tmp_path, service):
        config = _config(tmp_path, width=32, height=32, T=4, substeps=20, blur_len=1)
        bundle = service._bundle(config)
        frame = service._frame_stage(config, bundle, init_flow=bundle.gt_flow_total)
        stage = service._boundary_stage(config, bundle, frame)
        assert stage.common_bf.data.shape == stage.common_be.data.shape == (32, 32)
        assert 0 < int(stage.common_be.data.sum()) < 32 * 32
        assert stage.grad_dist.mass.sum() == pytest.approx(1.0)
        assert stage.boundary_dist.mass.sum() == pytest.approx(1.0)


class TestFusionStage:

    def test_event_windows_persist_along_the_tracks(self, tmp_path, service):
        config = _config(tmp_path, width=32, height=32, n_frames=2, T=8, substeps=40, blur_len=1)
        bundle = service._bundle(config)
        frame = service._frame_stage(config, bundle)
        stage = service._boundary_stage(config, bundle, frame)
        fusion = service._fusion_stage(config, bundle, frame, stage.template)
        assert fusion.extras["frame_peak_fraction"] >= 0.9
        assert fusion.extras["track_peak_persistence"] >= 0.8
        # slices are reconstructed on top of the reference frame, so they are as dense as it is
        assert 0.0 <= fusion.extras["event_peak_fraction"] <= 1.0

    def test_fused_volumes_differ_from_events_only_at_tracked_pixels(self, tmp_path, service):
        config = _config(tmp_path, width=32, height=32, T=4, substeps=20, blur_len=1)
        bundle = service._bundle(config)
        frame = service._frame_stage(config, bundle)
        stage = service._boundary_stage(config, bundle, frame)
        fusion = service._fusion_stage(config, bundle, frame, stage.template)
        tracked = np.zeros((32, 32), dtype=bool)
        for track in fusion.tracks:
            if not track.lost:
                tracked[track.origin[1], track.origin[0]] = True
        for fused, events in zip(fusion.fused, fusion.event_volumes):
            np.testing.assert_array_equal(fused.data[~tracked], events.data[~tracked])

    def test_fusion_beats_each_modality_alone(self, tmp_path, service):
        config = _config(tmp_path, width=64, height=64, blur_len=4, drop=2, ablations="true")
        service.run_pipeline(config)
        rows = pd.read_csv(tmp_path / "out" / "ablation.csv").set_index("variant")
        assert rows.loc["common_fusion", "epe"] <= rows.loc["frame_only", "epe"]
        assert rows.loc["common_fusion", "tepe"] <= rows.loc["event_only", "tepe"]
