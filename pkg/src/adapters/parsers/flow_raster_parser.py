# src/adapters/parsers/flow_raster_parser.py
"""
Float Raster Parser Module

Binary flow rasters: the magic "STFL", little-endian uint32 width and
height, then the u plane and the v plane as little-endian float32, row-major.
Scalar maps are stored in the u plane with a zero v plane.
"""

import logging

import numpy as np

from src.core.errors import RasterFormatError
from src.core.models import FlowField
from .base_parser import BaseParser

logger = logging.getLogger(__name__)

MAGIC = b"STFL"
_HEADER = np.dtype([("magic", "S4"), ("width", "<u4"), ("height", "<u4")])


class FlowRasterParser(BaseParser[FlowField]):
    """Float32 two-plane raster codec."""

    def parse(self, content: bytes) -> FlowField:
        if len(content) < _HEADER.itemsize or self._get_file_signature(content) != "stfl":
            raise RasterFormatError("not a float raster (missing STFL magic)")
        header = np.frombuffer(content, dtype=_HEADER, count=1)[0]
        width, height = int(header["width"]), int(header["height"])
        expected = _HEADER.itemsize + 2 * width * height * 4
        if width == 0 or height == 0 or len(content) != expected:
            raise RasterFormatError(f"raster payload is {len(content)} bytes, expected {expected} "
                                    f"for {width}x{height}")
        planes = np.frombuffer(content, dtype="<f4", offset=_HEADER.itemsize).reshape(2, height, width)
        return FlowField(u=planes[0].astype(np.float64), v=planes[1].astype(np.float64))

    def serialize(self, value: FlowField) -> bytes:
        header = np.array([(MAGIC, value.width, value.height)], dtype=_HEADER)
        planes = np.stack([value.u, value.v]).astype("<f4")
        return header.tobytes() + planes.tobytes()

    def describe(self, content: bytes) -> str:
        if len(content) < _HEADER.itemsize or self._get_file_signature(content) != "stfl":
            return super().describe(content)
        header = np.frombuffer(content, dtype=_HEADER, count=1)[0]
        return f"float raster {int(header['width'])}x{int(header['height'])}"
