# src/adapters/parsers/event_csv_parser.py
"""
Event CSV Parser Module

Reads and writes the text event format: a "# <width> <height>" header
followed by one "t x y p" record per line.
"""

import logging

from src.core.models import EventStream
from src.services.event_io import parse_events, serialize_events
from .base_parser import BaseParser

logger = logging.getLogger(__name__)


class EventCsvParser(BaseParser[EventStream]):
    """Event stream codec; validation lives in the event I/O service."""

    def parse(self, content: bytes) -> EventStream:
        stream = parse_events(self._decode_text(content))
        logger.debug(f"Loaded {len(stream)} events ({stream.width}x{stream.height})")
        return stream

    def serialize(self, value: EventStream) -> bytes:
        return serialize_events(value).encode("utf-8")

    def describe(self, content: bytes) -> str:
        header = self._decode_text(content).partition("\n")[0]
        return f"event stream {header.lstrip('# ').strip()}"
