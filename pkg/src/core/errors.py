# src/core/errors.py
"""
Domain Errors
Typed exception hierarchy shared by every service, adapter and the CLI.
"""

from typing import Optional


class StflowError(Exception):
    """Root of every error raised by the flow library."""


# --- event / frame input -------------------------------------------------

class EventFormatError(StflowError):
    """An event CSV could not be parsed."""


class MalformedHeader(EventFormatError):
    pass


class MalformedRecord(EventFormatError):
    pass


class OutOfBounds(EventFormatError):
    def __init__(self, x: float, y: float, message: Optional[str] = None):
        self.x = x
        self.y = y
        super().__init__(message or f"coordinate ({x}, {y}) outside the sensor")


class BadPolarity(EventFormatError):
    pass


class UnsortedTimestamps(EventFormatError):
    pass


class EmptyInterval(StflowError):
    pass


class InvalidSpec(StflowError):
    pass


class InvalidArgument(StflowError):
    pass


# --- shapes --------------------------------------------------------------

class ShapeError(StflowError):
    """Inputs do not have compatible sizes."""


class TooSmall(ShapeError):
    pass


class DimensionMismatch(ShapeError):
    pass


class BadWindow(ShapeError):
    pass


class BinMismatch(ShapeError):
    pass


class LengthMismatch(ShapeError):
    pass


# --- numeric ranges ------------------------------------------------------

class BadRange(StflowError):
    pass


class BadThresholds(StflowError):
    pass


class BadProbability(StflowError):
    pass


class BadExponent(StflowError):
    pass


class NonFinite(StflowError):
    pass


# --- fusion / tracking ---------------------------------------------------

class EmptyTemplate(StflowError):
    pass


class DegenerateK(StflowError):
    pass


class LostTrack(StflowError):
    pass


class EmptyInput(StflowError):
    pass


class NoTracks(StflowError):
    pass


class EmptyMask(StflowError):
    pass


# --- artifacts / orchestration ------------------------------------------

class RasterFormatError(StflowError):
    """A float raster file has a bad magic or a truncated payload."""


class ConfigError(StflowError):
    """Configuration problem; always names the offending key."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class StageError(StflowError):
    """Failure inside one pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage}: {cause}")
