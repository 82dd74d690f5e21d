# src/adapters/repositories.py
"""
Directory-backed bundle repository.

Layout of a bundle directory:
    events.csv                 event stream
    frames.txt                 "<relative path> <timestamp>" per frame
    frames/frame_XXX.png       16-bit intensity frames
    gt_flow.stfl               ground-truth flow over the window
    gt_slices/slice_XXX.stfl   ground-truth flow per slice
    scene.json                 scene description and degradation applied
"""

import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel

from src.core.errors import DimensionMismatch, RasterFormatError
from src.core.models import FlowField, FrameSequence, Image, SceneSpec, SynthBundle
from src.core.ports import IArtifactParser
from src.core.repositories import IBundleRepository
from src.services.event_io import slice_events
from src.services.synth import dense_ground_truth_tracks, region_labels

logger = logging.getLogger(__name__)


class BundleManifest(BaseModel):
    """Contents of scene.json."""
    spec: SceneSpec
    blur_len: int = 1
    drop: int = 1


class DirectoryBundleRepository(IBundleRepository):
    """
    Stores bundles as plain files, one codec per extension.
    Every artifact written here is read back by the matching load method.
    """

    def __init__(self, codec_map: Dict[str, IArtifactParser]):
        self._codecs = codec_map

    def _codec(self, suffix: str) -> IArtifactParser:
        codec = self._codecs.get(suffix)
        if codec is None:
            raise RasterFormatError(f"no codec registered for '{suffix}' files")
        return codec

    def _write(self, path: Path, content: bytes) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(content)
        logger.debug(f"Wrote {path} ({len(content)} bytes)")

    def save_bundle(self, bundle: SynthBundle, root: Path) -> Path:
        """Write every bundle artifact below root."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)

        # 1. Events
        self._write(root / "events.csv", self._codec(".csv").serialize(bundle.stream))

        # 2. Frames plus manifest
        png = self._codec(".png")
        manifest_lines = []
        for index, frame in enumerate(bundle.frames.frames):
            relative = f"frames/frame_{index:03d}.png"
            self._write(root / relative, png.serialize(frame))
            manifest_lines.append(f"{relative} {frame.t!r}")
        (root / "frames.txt").write_text("\n".join(manifest_lines) + "\n")

        # 3. Ground truth
        self.save_flow(bundle.gt_flow_total, root / "gt_flow.stfl")
        for k, flow in enumerate(bundle.gt_flow_slices):
            self.save_flow(flow, root / "gt_slices" / f"slice_{k:03d}.stfl")

        # 4. Scene description
        manifest = BundleManifest(spec=bundle.spec, blur_len=bundle.blur_len, drop=bundle.drop)
        (root / "scene.json").write_text(manifest.model_dump_json(indent=2) + "\n")

        logger.info(f"Saved bundle to {root}: {len(bundle.stream)} events, {len(bundle.frames)} frames")
        return root

    def load_bundle(self, root: Path) -> SynthBundle:
        """Read a bundle directory; slices are re-derived from the stream."""
        root = Path(root)
        manifest = BundleManifest.model_validate_json((root / "scene.json").read_text())
        spec = manifest.spec

        events = self._codec(".csv")
        content = (root / "events.csv").read_bytes()
        logger.debug(f"Reading events: {events.describe(content)}")
        stream = events.parse(content)
        if (stream.width, stream.height) != (spec.width, spec.height):
            raise DimensionMismatch(f"events are {stream.width}x{stream.height}, "
                                    f"scene is {spec.width}x{spec.height}")
        # the parsed window spans first to last event; the scene window is [0, duration]
        stream = stream.select(np.ones(len(stream), dtype=bool), 0.0, spec.duration)

        png = self._codec(".png")
        frames = []
        for line in (root / "frames.txt").read_text().splitlines():
            if not line.strip():
                continue
            relative, t = line.rsplit(maxsplit=1)
            frame = png.parse((root / relative).read_bytes())
            frames.append(Image(data=frame.data, t=float(t)))

        gt_slices = [self.load_flow(path) for path in sorted((root / "gt_slices").glob("slice_*.stfl"))]
        bundle = SynthBundle(
            spec=spec,
            frames=FrameSequence(frames=frames),
            stream=stream,
            slices=slice_events(stream, 0.0, spec.duration, spec.T),
            gt_flow_total=self.load_flow(root / "gt_flow.stfl"),
            gt_flow_slices=gt_slices,
            region_labels=region_labels(spec),
            gt_tracks=dense_ground_truth_tracks(spec),
            blur_len=manifest.blur_len,
            drop=manifest.drop,
        )
        logger.info(f"Loaded bundle from {root}: {len(stream)} events, {len(frames)} frames")
        return bundle

    def save_flow(self, flow: FlowField, path: Path) -> None:
        self._write(Path(path), self._codec(".stfl").serialize(flow))

    def load_flow(self, path: Path) -> FlowField:
        codec = self._codec(".stfl")
        content = Path(path).read_bytes()
        logger.debug(f"Reading {path}: {codec.describe(content)}")
        return codec.parse(content)

    def save_image(self, data: np.ndarray, path: Path) -> None:
        self._write(Path(path), self._codec(".png").encode_array(data))

    def load_mask(self, path: Path, shape: Optional[tuple] = None) -> np.ndarray:
        mask = self._codec(".png").decode_array(Path(path).read_bytes()) > 0
        if shape is not None and mask.shape != tuple(shape):
            raise DimensionMismatch(f"mask {mask.shape} vs raster {tuple(shape)}")
        return mask
