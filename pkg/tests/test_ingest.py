import io
import json
from datetime import datetime, timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import match_intervals, scan_log
from routinecast.errors import ConfigError, DegenerateInputError
from routinecast.ingest import (
    BEING_OUTSIDE,
    ActivityInterval,
    Ontology,
    RawEvent,
    SkipReport,
    Weekday,
    build_intervals,
    chronological_split,
    interval_to_record,
    load_aruba,
    parse_events,
    parse_line,
    read_intervals,
    write_intervals,
)

from conftest import chain, iv

T0 = datetime(2010, 11, 4, 8, 0)


def ev(minute: float, label: str, marker: str) -> RawEvent:
    return RawEvent(T0 + timedelta(minutes=minute), "M001", "ON", label, marker)


def test_parse_annotated_line():
    (e,) = parse_events(["2010-11-04 05:40:51.303739 M004 ON Bed_to_Toilet begin"])
    assert e == RawEvent(datetime(2010, 11, 4, 5, 40, 51, 303739), "M004", "ON", "bed_to_toilet", "begin")


def test_parse_plain_line_without_fraction():
    e = parse_line("2010-11-04 05:40:51 M004 OFF")
    assert e.timestamp == datetime(2010, 11, 4, 5, 40, 51)
    assert e.activity_label is None and e.marker is None


def test_parse_empty_input():
    assert parse_events([]) == []


def test_malformed_lines_are_counted_not_fatal():
    report = SkipReport()
    lines = [
        "2010-11-04 05:40:51.3 M004 ON",
        "M012 ON",
        "2010-13-45 99:00:00 M001 ON",
        "2011-01-01 10:00:00.0 M001 ON Relax",
        "2011-01-01 10:00:00 M001 ON Relax sometimes",
        "   ",
        "2011-01-01 10:00:00 M001 ON Relax END",
    ]
    events = parse_events(lines, report)
    assert len(events) == 2
    assert events[1].marker == "end"
    assert report.malformed == {"field_count": 1, "timestamp": 1, "label_without_marker": 1, "marker": 1}
    assert report.blank_lines == 1
    assert report.lines_read == 7


def test_event_count_matches_line_scanner(synthetic_lines):
    assert len(parse_events(synthetic_lines)) == len(scan_log(synthetic_lines))


def test_single_pair():
    (out,) = build_intervals([ev(0, "sleeping", "begin"), ev(480, "sleeping", "end")])
    assert out.label == "sleeping"
    assert out.duration_minutes == pytest.approx(480.0, abs=1e-9)


def test_leave_enter_become_being_outside():
    eps = 0.5
    events = [
        ev(0, "leave_home", "begin"),
        ev(eps, "leave_home", "end"),
        ev(90, "enter_home", "begin"),
        ev(90 + eps, "enter_home", "end"),
    ]
    (out,) = build_intervals(events)
    assert out.label == BEING_OUTSIDE
    assert out.start == T0
    assert out.duration_minutes == pytest.approx(90 + eps)


def test_repeated_begin_orphans_the_first():
    report = SkipReport()
    out = build_intervals(
        [ev(0, "relax", "begin"), ev(5, "relax", "begin"), ev(20, "relax", "end"), ev(25, "relax", "end")], report
    )
    assert [(o.label, o.duration_minutes) for o in out] == [("relax", 15.0)]
    assert report.excluded == {"unmatched_begin": 1, "unmatched_end": 1}


def test_nonpositive_and_overlap_exclusions():
    report = SkipReport()
    events = [
        ev(0, "work", "begin"),
        ev(0, "work", "end"),
        ev(10, "relax", "begin"),
        ev(15, "eating", "begin"),
        ev(30, "relax", "end"),
        ev(40, "eating", "end"),
    ]
    out = build_intervals(events, report)
    assert [o.label for o in out] == ["relax"]
    assert report.excluded == {"nonpositive_duration": 1, "overlap": 1}


def test_unpaired_home_events_are_dropped():
    report = SkipReport()
    events = [
        ev(0, "enter_home", "begin"),
        ev(1, "enter_home", "end"),
        ev(10, "leave_home", "begin"),
        ev(11, "leave_home", "end"),
    ]
    assert build_intervals(events, report) == []
    assert report.excluded == {"unpaired_enter_home": 1, "unpaired_leave_home": 1}


def test_equal_timestamps_keep_file_order():
    events = [ev(0, "a", "begin"), ev(0, "b", "begin"), ev(0, "a", "end"), ev(5, "b", "end")]
    out = build_intervals(events)
    # a is zero-length and dropped; b survives
    assert [o.label for o in out] == ["b"]


def test_synthetic_log_matches_oracle(synthetic_lines, synthetic_intervals):
    ours, _ = synthetic_intervals
    expected = match_intervals(scan_log(synthetic_lines))
    assert [(o.label, o.start, o.end) for o in ours] == expected


def test_synthetic_output_invariants(synthetic_intervals):
    ours, report = synthetic_intervals
    assert all(o.end > o.start and o.duration_minutes > 0 for o in ours)
    assert all(a.end <= b.start for a, b in zip(ours, ours[1:]))
    assert not {"leave_home", "enter_home"} & {o.label for o in ours}
    assert report.intervals == len(ours)
    assert len(Ontology.from_intervals(ours)) == 10


_LABELS = ("a", "b", "leave_home", "enter_home")


@st.composite
def marker_streams(draw):
    n = draw(st.integers(0, 40))
    steps = draw(st.lists(st.integers(0, 30), min_size=n, max_size=n))
    labels = draw(st.lists(st.sampled_from(_LABELS), min_size=n, max_size=n))
    markers = draw(st.lists(st.sampled_from(("begin", "end")), min_size=n, max_size=n))
    minute, events = 0, []
    for step, label, marker in zip(steps, labels, markers):
        minute += step
        events.append(ev(minute, label, marker))
    return events


@settings(max_examples=300, deadline=None)
@given(marker_streams())
def test_matching_equals_naive_scan(events):
    ours = build_intervals(events)
    tuples = [(e.timestamp, e.activity_label, e.marker) for e in events]
    assert [(o.label, o.start, o.end) for o in ours] == match_intervals(tuples)
    assert all(a.end <= b.start for a, b in zip(ours, ours[1:]))


def test_split_sizes():
    ivs = chain([("a", 10)] * 10)
    s = chronological_split(ivs, 0.8)
    assert (len(s.train), len(s.eval)) == (8, 2)
    s = chronological_split(ivs[:3], 0.5)
    assert (len(s.train), len(s.eval)) == (1, 2)
    assert s.train[-1].end <= s.eval[0].start
    assert s.all == tuple(ivs[:3])


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.5])
def test_split_rejects_bad_fraction(fraction):
    with pytest.raises(ConfigError):
        chronological_split(chain([("a", 1)] * 4), fraction)


def test_split_rejects_tiny_input():
    with pytest.raises(DegenerateInputError):
        chronological_split(chain([("a", 1)]), 0.8)


def test_split_boundary_on_synthetic(synthetic_intervals):
    ours, _ = synthetic_intervals
    s = chronological_split(ours, 0.8)
    by_start = sorted(ours, key=lambda o: o.start)
    cut = int(0.8 * len(ours))
    assert s.eval[0].start == by_start[cut].start
    assert max(o.end for o in s.train) <= min(o.start for o in s.eval)


def test_jsonl_round_trip(synthetic_intervals, synthetic_ontology):
    ours, _ = synthetic_intervals
    buf = io.StringIO()
    write_intervals(buf, ours, synthetic_ontology)
    buf.seek(0)
    assert read_intervals(buf) == ours


def test_record_fields():
    rec = interval_to_record(iv("sleeping", "2010-11-07 23:00:00", 480), Ontology(["eating", "sleeping"]))
    assert rec == {
        "label_index": 1,
        "label_name": "sleeping",
        "start_iso8601": "2010-11-07T23:00:00.000000",
        "end_iso8601": "2010-11-08T07:00:00.000000",
        "duration_minutes": 480.0,
        "day_of_week": "Sun",
    }
    json.dumps(rec)


def test_interval_day_of_week():
    assert iv("x", "2010-11-04 05:00:00", 1).day_of_week == Weekday.THU


def test_ontology_is_bijective():
    ont = Ontology(["b", "a", "c"])
    assert [ont.index(ont.name(i)) for i in range(3)] == [0, 1, 2]
    assert ont.lines() == ["0 : b", "1 : a", "2 : c"]


def test_load_aruba_on_synthetic_file(synthetic_log):
    split, ontology, report = load_aruba(synthetic_log)
    assert len(split.train) == int(0.8 * len(split.all))
    assert BEING_OUTSIDE in ontology
    assert report.to_dict()["intervals"] == len(split.all)


def test_interval_rejects_nonpositive_duration():
    with pytest.raises(ValueError):
        ActivityInterval("a", T0, T0)
