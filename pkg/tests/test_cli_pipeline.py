"""End-to-end tests of the stflow command line on small synthetic scenes."""

import io

import numpy as np
import pandas as pd
import pytest
from PIL import Image as PILImage

from src.adapters.parsers.flow_raster_parser import FlowRasterParser
from src.app_main import main
from src.core.models import FlowField
from src.services.tabular_processor import TabularProcessor

SMALL_SCENE = """\
# small scene so every stage runs in a few seconds
width = 32
height = 32
T = 4
substeps = 20
n_frames = 3
blur_len = 3
refine_steps = 3
win = 8
stride = 4
radius = 2
levels = 1
kmeans_k = 3
kmeans_max_iter = 5
c_min = 0
lost_after = 100
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_SCENE)
    return path


def _last_line(text):
    return text.strip().splitlines()[-1]


def _write_flow(path, flow):
    path.write_bytes(FlowRasterParser().serialize(flow))
    return path


class TestEvalAndViz:

    def test_identical_rasters(self, tmp_path, capsys):
        rng = np.random.default_rng(42)
        flow = _write_flow(tmp_path / "f.stfl", FlowField(u=rng.standard_normal((8, 8)),
                                                          v=rng.standard_normal((8, 8))))
        assert main(["eval", "--pred", str(flow), "--gt", str(flow)]) == 0
        assert _last_line(capsys.readouterr().out) == "0,0,,64"

    def test_mask_restricts_pixels(self, tmp_path, capsys):
        pred = _write_flow(tmp_path / "pred.stfl", FlowField.constant(4, 4, 3.0, 4.0))
        gt = _write_flow(tmp_path / "gt.stfl", FlowField.zeros(4, 4))
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[0, :3] = 1
        PILImage.fromarray(mask * 255).save(tmp_path / "mask.png")
        code = main(["eval", "--pred", str(pred), "--gt", str(gt), "--mask", str(tmp_path / "mask.png")])
        assert code == 0
        assert _last_line(capsys.readouterr().out) == "5,100,,3"

    def test_corrupt_raster_is_a_stage_failure(self, tmp_path, capsys):
        bad = tmp_path / "bad.stfl"
        bad.write_bytes(b"STFL\x01")
        assert main(["eval", "--pred", str(bad), "--gt", str(bad)]) == 1
        assert "stflow: stage eval:" in capsys.readouterr().err

    def test_zero_flow_renders_white(self, tmp_path, capsys):
        flow = _write_flow(tmp_path / "zero.stfl", FlowField.zeros(6, 5))
        target = tmp_path / "zero.png"
        assert main(["viz", "--flow", str(flow), "--out", str(target)]) == 0
        with PILImage.open(target) as img:
            pixels = np.asarray(img.convert("RGB"))
        assert pixels.shape == (5, 6, 3)
        assert np.all(pixels == 255)

    def test_viz_needs_out(self, tmp_path):
        flow = _write_flow(tmp_path / "zero.stfl", FlowField.zeros(4, 4))
        assert main(["viz", "--flow", str(flow)]) == 2


class TestConfigErrors:

    def test_invalid_value_exits_with_two(self, tmp_path, capsys):
        code = main(["synth", "--set", "T=0", "--out", str(tmp_path / "out")])
        assert code == 2
        assert "stflow: config: T:" in capsys.readouterr().err

    def test_malformed_override(self, tmp_path):
        assert main(["synth", "--set", "T5", "--out", str(tmp_path / "out")]) == 2


class TestGradcheckCommand:

    def test_prints_small_error(self, capsys):
        assert main(["gradcheck", "--instances", "2"]) == 0
        assert float(_last_line(capsys.readouterr().out)) < 1e-4


class TestStages:

    def test_synth_boundary_fuse(self, tmp_path, small_config, capsys):
        bundle = tmp_path / "bundle"
        assert main(["synth", "--config", str(small_config), "--out", str(bundle)]) == 0
        assert (bundle / "events.csv").exists() and (bundle / "gt_flow.stfl").exists()

        phase1 = tmp_path / "phase1"
        assert main(["boundary", "--config", str(small_config), "--input", str(bundle),
                     "--out", str(phase1)]) == 0
        template = TabularProcessor.read_template((phase1 / "template.csv").read_bytes())
        assert len(template) > 0
        assert (phase1 / "boundary_frame.png").exists()

        phase2 = tmp_path / "phase2"
        assert main(["fuse", "--config", str(small_config), "--input", str(bundle),
                     "--template", str(phase1 / "template.csv"),
                     "--init-flow", str(bundle / "gt_flow.stfl"), "--out", str(phase2)]) == 0
        assert len(list((phase2 / "fused_slices").glob("slice_*.stfl"))) == 4
        tracks = pd.read_csv(phase2 / "tracks.csv")
        assert tracks["track"].nunique() == len(template)
        losses = pd.read_csv(phase2 / "losses.csv")
        assert set(losses["term"]) >= {"pho", "kl", "entropy", "spa", "temp", "consis", "total"}

    def test_refine_writes_history(self, tmp_path, small_config):
        out = tmp_path / "refine"
        assert main(["refine", "--config", str(small_config), "--out", str(out)]) == 0
        history = pd.read_csv(out / "refine_history.csv")["loss"].to_numpy()
        assert np.all(np.diff(history) <= 0)

    def test_gradients_with_sweep(self, tmp_path, small_config):
        out = tmp_path / "gradients"
        assert main(["gradients", "--config", str(small_config), "--sweep-blur", "3,1",
                     "--out", str(out)]) == 0
        sweep = pd.read_csv(out / "kl_sweep.csv")
        assert sweep["blur_len"].tolist() == [3, 1]
        assert np.all(sweep["kl"] >= -1e-9)
        histograms = pd.read_csv(out / "histograms.csv")
        assert histograms["gradient"].sum() == pytest.approx(1.0)


class TestRun:

    def test_run_writes_every_artifact(self, tmp_path, small_config, capsys):
        out = tmp_path / "run"
        assert main(["run", "--config", str(small_config), "--ablations", "--out", str(out)]) == 0
        line = _last_line(capsys.readouterr().out)
        assert line.endswith(",1024")
        for name in ("config.txt", "metrics.csv", "losses.csv", "fused_flow.stfl", "fused_flow.png",
                     "template.csv", "tracks.csv", "histograms.csv", "refine_history.csv", "ablation.csv"):
            assert (out / name).exists(), name
        assert (out / "bundle" / "scene.json").exists()
        ablation = pd.read_csv(out / "ablation.csv")
        assert ablation["variant"].tolist() == ["frame_only", "event_only", "common_fusion",
                                                "fusion_no_clustering", "cluster_gmm", "cluster_dbscan",
                                                "track_event_signal", "track_visual_feature",
                                                "no_common_space"]
        metrics = pd.read_csv(out / "metrics.csv")
        assert metrics.loc[0, "tepe"] >= 0.0

    def test_same_seed_same_metrics(self, tmp_path, small_config):
        for name in ("a", "b"):
            assert main(["run", "--config", str(small_config), "--seed", "5",
                         "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()

    def test_every_artifact_is_reproducible(self, tmp_path, small_config):
        out = tmp_path / "run"

        def _snapshot():
            return {path.relative_to(out): path.read_bytes() for path in sorted(out.rglob("*")) if path.is_file()}

        assert main(["run", "--config", str(small_config), "--ablations", "--out", str(out)]) == 0
        first = _snapshot()
        assert main(["run", "--config", str(small_config), "--ablations", "--out", str(out)]) == 0
        second = _snapshot()
        assert first.keys() == second.keys()
        for name, content in first.items():
            assert second[name] == content, str(name)
