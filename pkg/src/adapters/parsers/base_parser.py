# src/adapters/parsers/base_parser.py
"""
Base Parser Module

Provides the abstract artifact parser with the common byte-level utilities.
All concrete codecs inherit from BaseParser so they decode text, check
signatures and report problems the same way.
"""

from abc import ABC, abstractmethod
from typing import TypeVar

from src.core.ports import IArtifactParser

T = TypeVar("T")


class BaseParser(IArtifactParser[T], ABC):
    """
    Abstract base parser providing the shared helpers:
    - text decoding with a BOM-aware encoding list
    - file signature detection
    """

    encodings = ("utf-8-sig", "utf-8", "latin-1")

    @abstractmethod
    def parse(self, content: bytes) -> T:
        pass

    @abstractmethod
    def serialize(self, value: T) -> bytes:
        pass

    def _decode_text(self, content: bytes) -> str:
        """
        Decode text content, trying each known encoding in turn.

        Args:
            content: Artifact content as bytes

        Returns:
            Decoded text (latin-1 never fails, so this always succeeds)
        """
        for encoding in self.encodings:
            try:
                return content.decode(encoding)
            except UnicodeDecodeError:
                continue
        return content.decode("latin-1", errors="replace")

    def _get_file_signature(self, content: bytes) -> str:
        """
        Get the artifact signature from its first bytes.

        Returns:
            'stfl', 'png', 'events' or 'unknown'
        """
        if content.startswith(b"STFL"):
            return "stfl"
        if content.startswith(b"\x89PNG\r\n\x1a\n"):
            return "png"
        if content.lstrip(b"\xef\xbb\xbf").startswith(b"#"):
            return "events"
        return "unknown"
