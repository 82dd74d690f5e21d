# src/core/ports.py
from abc import ABC, abstractmethod
from typing import Generic, TypeVar

T = TypeVar("T")


class IArtifactParser(ABC, Generic[T]):
    """
    A port for any adapter that turns an on-disk artifact into a domain model and back.
    One parser per file extension; the wiring layer keeps the extension map.
    """
    @abstractmethod
    def parse(self, content: bytes) -> T:
        """
        Parses artifact content.

        Returns:
            The domain model stored in the artifact
        """
        pass

    @abstractmethod
    def serialize(self, value: T) -> bytes:
        """
        Serializes a domain model.

        Returns:
            Bytes that parse() reads back into an equivalent model
        """
        pass

    def describe(self, content: bytes) -> str:
        """Short human-readable summary of an artifact, for logs."""
        return f"{len(content)} bytes"
