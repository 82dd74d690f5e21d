#!/usr/bin/env python3
"""
Event I/O Service
Parses and validates event streams, slices them into temporal bins and
accumulates polarity into raster maps.
"""

import io
import logging
from typing import List

import numpy as np
import pandas as pd

from src.core.errors import (
    BadPolarity,
    EmptyInterval,
    InvalidArgument,
    MalformedHeader,
    MalformedRecord,
    OutOfBounds,
    UnsortedTimestamps,
)
from src.core.models import EventStream, ScalarMap

logger = logging.getLogger(__name__)

_COLUMNS = ["t", "x", "y", "p"]


def _parse_header(line: str):
    parts = line.split()
    if len(parts) != 3 or parts[0] != "#":
        raise MalformedHeader(f"expected '# <width> <height>', got {line!r}")
    try:
        width, height = int(parts[1]), int(parts[2])
    except ValueError:
        raise MalformedHeader(f"non-integer sensor size in {line!r}")
    if width <= 0 or height <= 0:
        raise MalformedHeader(f"sensor size must be positive, got {width}x{height}")
    return width, height


def parse_events(text: str) -> EventStream:
    """
    Parse the event CSV format.

    First line "# <width> <height>", then one "t x y p" record per line.

    Returns:
        EventStream with t_start/t_end set to the first/last timestamp (0 when empty)
    """
    header, _, body = text.partition("\n")
    width, height = _parse_header(header.strip())

    if not body.strip():
        return EventStream(width=width, height=height)

    for number, line in enumerate(body.splitlines(), start=2):
        fields = len(line.split())
        if fields not in (0, len(_COLUMNS)):
            raise MalformedRecord(f"line {number}: expected 4 fields 't x y p', got {fields}")

    try:
        frame = pd.read_csv(io.StringIO(body), sep=r"\s+", header=None, names=_COLUMNS,
                            index_col=False, dtype=np.float64, comment=None,
                            skip_blank_lines=True, float_precision="round_trip")
    except (ValueError, pd.errors.ParserError) as e:
        raise MalformedRecord(f"cannot parse event records: {e}")
    if frame.isna().any().any():
        raise MalformedRecord("every event record needs 4 fields: t x y p")

    t = frame["t"].to_numpy()
    x = frame["x"].to_numpy()
    y = frame["y"].to_numpy()
    p = frame["p"].to_numpy()

    if not np.all(np.isfinite(t)) or np.any(t < 0):
        raise MalformedRecord("timestamps must be finite and non-negative")
    if np.any(x != np.round(x)) or np.any(y != np.round(y)):
        raise MalformedRecord("pixel coordinates must be integers")
    outside = (x < 0) | (x >= width) | (y < 0) | (y >= height)
    if np.any(outside):
        first = int(np.argmax(outside))
        raise OutOfBounds(x[first], y[first])
    bad = (p != 1) & (p != -1)
    if np.any(bad):
        raise BadPolarity(f"polarity must be +1 or -1, got {p[int(np.argmax(bad))]!r}")
    if np.any(np.diff(t) < 0):
        where = int(np.argmax(np.diff(t) < 0)) + 1
        raise UnsortedTimestamps(f"record {where + 1} goes back in time ({t[where]} < {t[where - 1]})")

    stream = EventStream(width=width, height=height, t_start=float(t[0]), t_end=float(t[-1]),
                         t=t, x=x.astype(np.int64), y=y.astype(np.int64), p=p.astype(np.int64))
    logger.debug(f"Parsed {len(stream)} events on a {width}x{height} sensor")
    return stream


def serialize_events(stream: EventStream) -> str:
    """Render a stream in the event CSV format (timestamps round-trip exactly)."""
    lines = [f"# {stream.width} {stream.height}"]
    lines.extend(f"{float(t)!r} {int(x)} {int(y)} {int(p)}"
                 for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p))
    return "\n".join(lines) + "\n"


def slice_edges(t0: float, t1: float, T: int) -> np.ndarray:
    """Slice boundaries t0 + k*(t1-t0)/T for k = 0..T (last pinned to t1)."""
    edges = np.array([t0 + k * (t1 - t0) / T for k in range(T + 1)], dtype=np.float64)
    edges[-1] = t1
    return edges


def slice_events(stream: EventStream, t0: float, t1: float, T: int) -> List[EventStream]:
    """
    Split the events of [t0, t1] into T equal slices.

    Slices are half-open [lo, hi) except the last, which is closed, so the
    union is exactly the windowed stream.
    """
    if t0 >= t1:
        raise EmptyInterval(f"empty interval [{t0}, {t1}]")
    if T < 1:
        raise InvalidArgument(f"slice count must be >= 1, got {T}")

    edges = slice_edges(t0, t1, T)
    inside = (stream.t >= t0) & (stream.t <= t1)
    index = np.searchsorted(edges, stream.t, side="right") - 1
    index = np.minimum(index, T - 1)

    slices = [stream.select(inside & (index == k), float(edges[k]), float(edges[k + 1]))
              for k in range(T)]
    logger.debug(f"Sliced {int(inside.sum())} events into {T} slices")
    return slices


def accumulate_polarity(stream: EventStream, C: float) -> ScalarMap:
    """Signed event count per pixel times C; unvisited pixels are 0."""
    if C <= 0:
        raise InvalidArgument(f"C must be > 0, got {C}")
    counts = np.zeros((stream.height, stream.width), dtype=np.float64)
    np.add.at(counts, (stream.y, stream.x), stream.p.astype(np.float64))
    return ScalarMap(data=counts * C)


def event_counts(stream: EventStream) -> np.ndarray:
    """Unsigned number of events per pixel."""
    counts = np.zeros((stream.height, stream.width), dtype=np.int64)
    np.add.at(counts, (stream.y, stream.x), 1)
    return counts
