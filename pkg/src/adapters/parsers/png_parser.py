# src/adapters/parsers/png_parser.py
"""
PNG Parser Module

Intensity frames, binary maps and colour renderings as PNG via Pillow.
Frames are written as 16-bit grayscale so intensities survive a round trip
to within 1/65535.
"""

import io
import logging

import numpy as np
from PIL import Image as PILImage

from src.core.errors import RasterFormatError
from src.core.models import Image
from .base_parser import BaseParser

logger = logging.getLogger(__name__)

_FULL_SCALE = {8: 255.0, 16: 65535.0}


class PngImageParser(BaseParser[Image]):
    """Grayscale intensity frames; the timestamp lives in the frame manifest."""

    def parse(self, content: bytes) -> Image:
        return Image(data=self.decode_array(content, as_intensity=True))

    def serialize(self, value: Image) -> bytes:
        levels = np.round(np.clip(value.data, 0.0, 1.0) * _FULL_SCALE[16]).astype(np.uint16)
        return self._encode(PILImage.fromarray(levels))

    def decode_array(self, content: bytes, as_intensity: bool = False) -> np.ndarray:
        """
        Read a PNG into a 2-D array.

        Args:
            content: PNG bytes
            as_intensity: scale to [0, 1] by the bit depth instead of returning raw levels

        Returns:
            (H, W) array; colour PNGs are converted to luminance first
        """
        if self._get_file_signature(content) != "png":
            raise RasterFormatError("not a PNG file")
        with PILImage.open(io.BytesIO(content)) as img:
            if img.mode in ("RGB", "RGBA", "P", "LA"):
                img = img.convert("L")
            depth = 8 if img.mode in ("L", "1") else 16
            levels = np.asarray(img, dtype=np.float64)
        if not as_intensity:
            return levels
        return np.clip(levels / _FULL_SCALE[depth], 0.0, 1.0)

    def encode_array(self, data: np.ndarray) -> bytes:
        """
        Encode a binary map (0/1), an (H, W, 3) uint8 colour image, or a
        float intensity raster in [0, 1].
        """
        data = np.asarray(data)
        if data.ndim == 3:
            return self._encode(PILImage.fromarray(data.astype(np.uint8)))
        if data.dtype == np.uint8 or data.dtype == bool:
            return self._encode(PILImage.fromarray((data.astype(np.uint8) > 0).astype(np.uint8) * 255))
        return self.serialize(Image(data=data))

    @staticmethod
    def _encode(img: PILImage.Image) -> bytes:
        buffer = io.BytesIO()
        img.save(buffer, format="PNG")
        return buffer.getvalue()

    def describe(self, content: bytes) -> str:
        with PILImage.open(io.BytesIO(content)) as img:
            return f"png {img.width}x{img.height} ({img.mode})"
