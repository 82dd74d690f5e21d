"""Tests for event parsing, slicing and polarity accumulation."""

import numpy as np
import pytest

from src.core.errors import (
    BadPolarity,
    EmptyInterval,
    InvalidArgument,
    MalformedHeader,
    MalformedRecord,
    OutOfBounds,
    UnsortedTimestamps,
)
from src.core.models import Event, EventStream
from src.services.event_io import (
    accumulate_polarity,
    event_counts,
    parse_events,
    serialize_events,
    slice_edges,
    slice_events,
)


def _stream(ts, xs, ys, ps, width=4, height=3, t0=0.0, t1=1.0):
    return EventStream(width=width, height=height, t_start=t0, t_end=t1,
                       t=np.array(ts, dtype=np.float64), x=np.array(xs), y=np.array(ys), p=np.array(ps))


class TestParseEvents:

    def test_valid_stream(self):
        stream = parse_events("# 4 3\n0.1 0 0 1\n0.2 3 2 -1\n")
        assert (stream.width, stream.height) == (4, 3)
        assert len(stream) == 2
        assert stream.t_start == pytest.approx(0.1)
        assert stream.t_end == pytest.approx(0.2)
        np.testing.assert_array_equal(stream.p, [1, -1])
        np.testing.assert_array_equal(stream.x, [0, 3])

    def test_header_only_gives_empty_stream(self):
        stream = parse_events("# 8 8\n")
        assert len(stream) == 0
        assert stream.width == 8

    def test_missing_header(self):
        with pytest.raises(MalformedHeader):
            parse_events("4 3\n0.1 0 0 1\n")

    def test_short_record(self):
        with pytest.raises(MalformedRecord):
            parse_events("# 4 3\n0.1 0 0\n")

    def test_extra_field_is_rejected_not_shifted(self):
        with pytest.raises(MalformedRecord):
            parse_events("# 4 4\n0.5 1 2 1 1")

    def test_extra_field_on_a_later_line(self):
        with pytest.raises(MalformedRecord, match="line 3"):
            parse_events("# 4 4\n0.1 0 0 1\n0.2 1 1 -1 7\n")

    def test_out_of_bounds(self):
        with pytest.raises(OutOfBounds):
            parse_events("# 4 3\n0.1 4 0 1\n")

    def test_bad_polarity(self):
        with pytest.raises(BadPolarity):
            parse_events("# 4 3\n0.1 0 0 0\n")

    def test_unsorted(self):
        with pytest.raises(UnsortedTimestamps):
            parse_events("# 4 3\n0.2 0 0 1\n0.1 1 0 1\n")

    def test_serialized_text_parses_back(self):
        stream = _stream([0.125, 0.5, 0.75], [0, 1, 2], [0, 1, 2], [1, -1, 1], t0=0.125, t1=0.75)
        again = parse_events(serialize_events(stream))
        np.testing.assert_array_equal(again.t, stream.t)
        np.testing.assert_array_equal(again.p, stream.p)


class TestSliceEvents:

    def test_half_open_slices_with_closed_last(self):
        stream = _stream([0.0, 0.25, 0.5, 0.75, 1.0], [0] * 5, [0] * 5, [1] * 5)
        slices = slice_events(stream, 0.0, 1.0, 4)
        assert [len(s) for s in slices] == [1, 1, 1, 2]

    def test_union_is_the_window(self):
        rng = np.random.default_rng(42)
        ts = np.sort(rng.uniform(0.0, 1.0, 200))
        stream = _stream(ts, rng.integers(0, 4, 200), rng.integers(0, 3, 200), rng.choice([-1, 1], 200))
        slices = slice_events(stream, 0.0, 1.0, 7)
        assert sum(len(s) for s in slices) == 200
        for k, s in enumerate(slices):
            assert s.t_start == pytest.approx(k / 7)
            if len(s):
                assert s.t.min() >= s.t_start and s.t.max() <= s.t_end

    def test_edges(self):
        np.testing.assert_allclose(slice_edges(0.0, 1.0, 4), [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_empty_interval(self):
        with pytest.raises(EmptyInterval):
            slice_events(_stream([], [], [], []), 0.5, 0.5, 4)

    def test_zero_slices(self):
        with pytest.raises(InvalidArgument):
            slice_events(_stream([], [], [], []), 0.0, 1.0, 0)


class TestAccumulatePolarity:

    def test_signed_sum_times_threshold(self):
        stream = _stream([0.1, 0.2, 0.3, 0.4], [1, 1, 1, 2], [1, 1, 1, 0], [1, 1, -1, -1])
        acc = accumulate_polarity(stream, 0.05)
        assert acc.data[1, 1] == pytest.approx(0.05)
        assert acc.data[0, 2] == pytest.approx(-0.05)
        assert np.count_nonzero(acc.data) == 2

    def test_counts_are_unsigned(self):
        stream = _stream([0.1, 0.2], [1, 1], [1, 1], [1, -1])
        assert event_counts(stream)[1, 1] == 2
        assert accumulate_polarity(stream, 0.05).data[1, 1] == 0.0

    def test_threshold_must_be_positive(self):
        with pytest.raises(InvalidArgument):
            accumulate_polarity(_stream([], [], [], []), 0.0)


class TestEventStreamModel:

    def test_from_events_and_back(self):
        events = [Event(t=0.1, x=0, y=1, p=1), Event(t=0.4, x=3, y=2, p=-1)]
        stream = EventStream.from_events(events, width=4, height=3)
        assert (stream.t_start, stream.t_end) == (0.1, 0.4)
        assert stream.events == events

    def test_rejects_unsorted_columns(self):
        with pytest.raises(ValueError):
            _stream([0.3, 0.2], [0, 0], [0, 0], [1, 1])
