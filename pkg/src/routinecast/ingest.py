"""CASAS event-log parsing, begin/end interval matching and the chronological split.

A CASAS Aruba line looks like::

    2010-11-04 05:40:51.303739 M004 ON Bed_to_Toilet begin

Lines carrying only a sensor reading are parsed (they count towards the
event and date totals) but never become intervals. ``leave_home`` and
``enter_home`` blocks are folded into a single ``being_outside`` interval.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import IntEnum
from pathlib import Path
from typing import IO, Iterable, Iterator, NamedTuple, Sequence

from .errors import ConfigError, DegenerateInputError

log = logging.getLogger(__name__)

BEGIN = "begin"
END = "end"
LEAVE_HOME = "leave_home"
ENTER_HOME = "enter_home"
BEING_OUTSIDE = "being_outside"


class Weekday(IntEnum):
    """Day of week, numbered like :meth:`datetime.weekday`."""

    MON = 0
    TUE = 1
    WED = 2
    THU = 3
    FRI = 4
    SAT = 5
    SUN = 6

    @property
    def short(self) -> str:
        return self.name.capitalize()

    @property
    def long(self) -> str:
        return _LONG_NAMES[self.value]

    @classmethod
    def of(cls, when: datetime) -> "Weekday":
        return cls(when.weekday())

    @classmethod
    def parse(cls, text: str) -> "Weekday":
        key = text.strip().lower()
        for day in cls:
            if key in (day.short.lower(), day.long.lower()):
                return day
        raise ValueError(f"unknown day of week: {text!r}")


_LONG_NAMES = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")


def canonical_label(raw: str) -> str:
    """Lowercase, underscore-joined activity name (``Meal_Preparation`` -> ``meal_preparation``)."""
    return "_".join(raw.strip().lower().replace("-", "_").split())


class RawEvent(NamedTuple):
    timestamp: datetime
    sensor_id: str
    sensor_value: str
    activity_label: str | None = None
    marker: str | None = None  # BEGIN or END, present iff activity_label is


@dataclass(frozen=True)
class ActivityInterval:
    label: str
    start: datetime
    end: datetime

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError(f"interval {self.label!r} must end after it starts ({self.start} -> {self.end})")

    @property
    def duration_minutes(self) -> float:
        return (self.end - self.start) / timedelta(minutes=1)

    @property
    def day_of_week(self) -> Weekday:
        return Weekday.of(self.start)


@dataclass(frozen=True)
class ActivityLabel:
    index: int
    name: str


class Ontology:
    """Bijection between label names and small 0-based indices."""

    def __init__(self, names: Iterable[str]):
        self.names: tuple[str, ...] = tuple(names)
        if len(set(self.names)) != len(self.names):
            raise ConfigError(f"duplicate labels in ontology: {self.names}")
        self._index = {name: i for i, name in enumerate(self.names)}

    @classmethod
    def from_intervals(cls, intervals: Iterable[ActivityInterval], include_outside: bool = True) -> "Ontology":
        names = {iv.label for iv in intervals}
        if include_outside:
            names.add(BEING_OUTSIDE)
        return cls(sorted(names))

    def index(self, name: str) -> int:
        return self._index[name]

    def name(self, index: int) -> str:
        return self.names[index]

    def label(self, name: str) -> ActivityLabel:
        return ActivityLabel(self._index[name], name)

    def lines(self) -> list[str]:
        return [f"{i} : {name}" for i, name in enumerate(self.names)]

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Ontology) and self.names == other.names

    def __hash__(self) -> int:
        return hash(self.names)

    def __repr__(self) -> str:
        return f"Ontology({list(self.names)!r})"


@dataclass
class SkipReport:
    """Per-line parse failures and per-interval exclusions, by reason."""

    lines_read: int = 0
    blank_lines: int = 0
    events: int = 0
    malformed: Counter = field(default_factory=Counter)
    malformed_examples: list[tuple[int, str]] = field(default_factory=list)
    excluded: Counter = field(default_factory=Counter)
    intervals: int = 0
    max_examples: int = 20

    def skip_line(self, lineno: int, reason: str) -> None:
        self.malformed[reason] += 1
        if len(self.malformed_examples) < self.max_examples:
            self.malformed_examples.append((lineno, reason))

    def to_dict(self) -> dict:
        return {
            "lines_read": self.lines_read,
            "blank_lines": self.blank_lines,
            "events": self.events,
            "malformed_lines": dict(sorted(self.malformed.items())),
            "malformed_examples": [{"line": n, "reason": r} for n, r in self.malformed_examples],
            "excluded_intervals": dict(sorted(self.excluded.items())),
            "intervals": self.intervals,
        }


def _digits(text: str, width: int) -> int:
    if len(text) != width or not text.isdigit():
        raise ValueError(text)
    return int(text)


def parse_timestamp(date_part: str, time_part: str) -> datetime:
    """Parse ``YYYY-MM-DD`` and ``HH:MM:SS[.f{1,6}]``."""
    if len(date_part) != 10 or date_part[4] != "-" or date_part[7] != "-":
        raise ValueError(date_part)
    hms, dot, frac = time_part.partition(".")
    if len(hms) != 8 or hms[2] != ":" or hms[5] != ":":
        raise ValueError(time_part)
    micro = 0
    if dot:
        if not 1 <= len(frac) <= 6 or not frac.isdigit():
            raise ValueError(time_part)
        micro = int(frac.ljust(6, "0"))
    return datetime(
        _digits(date_part[0:4], 4),
        _digits(date_part[5:7], 2),
        _digits(date_part[8:10], 2),
        _digits(hms[0:2], 2),
        _digits(hms[3:5], 2),
        _digits(hms[6:8], 2),
        micro,
    )


def parse_line(line: str) -> RawEvent:
    """Parse one log line; raises ``ValueError`` with a short reason on bad input."""
    parts = line.split()
    n = len(parts)
    if n not in (4, 6):
        raise ValueError("label_without_marker" if n == 5 else "field_count")
    try:
        ts = parse_timestamp(parts[0], parts[1])
    except ValueError:
        raise ValueError("timestamp") from None
    if n == 4:
        return RawEvent(ts, parts[2], parts[3])
    marker = parts[5].lower()
    if marker not in (BEGIN, END):
        raise ValueError("marker")
    return RawEvent(ts, parts[2], parts[3], canonical_label(parts[4]), marker)


def iter_events(stream: Iterable[str], report: SkipReport | None = None) -> Iterator[RawEvent]:
    report = report if report is not None else SkipReport()
    for lineno, line in enumerate(stream, start=1):
        report.lines_read += 1
        if not line.strip():
            report.blank_lines += 1
            continue
        try:
            event = parse_line(line)
        except ValueError as exc:
            report.skip_line(lineno, str(exc))
            continue
        report.events += 1
        yield event


def parse_events(stream: Iterable[str], report: SkipReport | None = None) -> list[RawEvent]:
    """Parse every well-formed line of ``stream`` in file order.

    Malformed lines are skipped and tallied in ``report``; read errors on the
    stream itself propagate.
    """
    return list(iter_events(stream, report))


def read_events(path: str | Path, report: SkipReport | None = None) -> list[RawEvent]:
    with open(path, encoding="utf-8", errors="replace") as fh:
        return parse_events(fh, report)


class _Pair(NamedTuple):
    start: datetime
    pos: int  # file position of the Begin, breaks start-time ties
    label: str
    end: datetime


def _match_pairs(events: Sequence[RawEvent], excluded: Counter) -> list[_Pair]:
    # One open Begin per label; a repeated Begin orphans the earlier one.
    open_begin: dict[str, tuple[int, RawEvent]] = {}
    pairs: list[_Pair] = []
    for pos, ev in enumerate(events):
        if ev.marker is None:
            continue
        label = ev.activity_label
        if ev.marker == BEGIN:
            if label in open_begin:
                excluded["unmatched_begin"] += 1
            open_begin[label] = (pos, ev)
        else:
            opened = open_begin.pop(label, None)
            if opened is None:
                excluded["unmatched_end"] += 1
                continue
            begin_pos, begin = opened
            pairs.append(_Pair(begin.timestamp, begin_pos, label, ev.timestamp))
    if open_begin:
        excluded["unmatched_begin"] += len(open_begin)
    return pairs


def _fold_outside(pairs: list[_Pair], excluded: Counter) -> list[_Pair]:
    out: list[_Pair] = []
    pending: _Pair | None = None
    for pair in sorted(pairs):
        if pair.label == LEAVE_HOME:
            if pending is not None:
                excluded["unpaired_leave_home"] += 1
            pending = pair
        elif pair.label == ENTER_HOME:
            if pending is None:
                excluded["unpaired_enter_home"] += 1
                continue
            out.append(pending._replace(label=BEING_OUTSIDE, end=pair.end))
            pending = None
        else:
            out.append(pair)
    if pending is not None:
        excluded["unpaired_leave_home"] += 1
    return sorted(out)


def build_intervals(events: Sequence[RawEvent], report: SkipReport | None = None) -> list[ActivityInterval]:
    """Turn begin/end markers into disjoint, start-ordered activity intervals.

    Matching is a single pass: a Begin of label ``L`` pairs with the next event
    of label ``L`` if that event is an End. Each ``leave_home`` interval is then
    joined with the following ``enter_home`` interval into one ``being_outside``
    interval spanning leave-begin to enter-end. Intervals with non-positive
    duration are dropped, and so is any interval starting before the previously
    kept one has ended. Every exclusion is counted in ``report.excluded``.
    """
    report = report if report is not None else SkipReport()
    excluded = report.excluded
    kept: list[ActivityInterval] = []
    for pair in _fold_outside(_match_pairs(events, excluded), excluded):
        if pair.end <= pair.start:
            excluded["nonpositive_duration"] += 1
        elif kept and pair.start < kept[-1].end:
            excluded["overlap"] += 1
        else:
            kept.append(ActivityInterval(pair.label, pair.start, pair.end))
    report.intervals = len(kept)
    if excluded:
        log.info("excluded intervals: %s", dict(excluded))
    return kept


@dataclass(frozen=True)
class SplitDataset:
    train: tuple[ActivityInterval, ...]
    eval: tuple[ActivityInterval, ...]
    split_fraction: float = 0.8

    @property
    def all(self) -> tuple[ActivityInterval, ...]:
        return self.train + self.eval


def chronological_split(intervals: Sequence[ActivityInterval], fraction: float = 0.8) -> SplitDataset:
    """First ``floor(fraction * n)`` intervals train, the rest evaluate."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction}")
    n = len(intervals)
    if n < 2:
        raise DegenerateInputError(f"need at least 2 intervals to split, got {n}")
    if any(b.start < a.start for a, b in zip(intervals, intervals[1:])):
        raise ConfigError("intervals must be sorted by start time")
    cut = math.floor(fraction * n)
    return SplitDataset(tuple(intervals[:cut]), tuple(intervals[cut:]), fraction)


# -- interval file format -------------------------------------------------------


def interval_to_record(iv: ActivityInterval, ontology: Ontology) -> dict:
    return {
        "label_index": ontology.index(iv.label),
        "label_name": iv.label,
        "start_iso8601": iv.start.isoformat(timespec="microseconds"),
        "end_iso8601": iv.end.isoformat(timespec="microseconds"),
        "duration_minutes": iv.duration_minutes,
        "day_of_week": iv.day_of_week.short,
    }


def interval_from_record(rec: dict) -> ActivityInterval:
    return ActivityInterval(
        rec["label_name"],
        datetime.fromisoformat(rec["start_iso8601"]),
        datetime.fromisoformat(rec["end_iso8601"]),
    )


def write_intervals(dest: str | Path | IO[str], intervals: Iterable[ActivityInterval], ontology: Ontology) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8") as fh:
            write_intervals(fh, intervals, ontology)
        return
    for iv in intervals:
        dest.write(json.dumps(interval_to_record(iv, ontology)) + "\n")


def read_intervals(src: str | Path | IO[str]) -> list[ActivityInterval]:
    if isinstance(src, (str, Path)):
        with open(src, encoding="utf-8") as fh:
            return read_intervals(fh)
    return [interval_from_record(json.loads(line)) for line in src if line.strip()]


def read_ontology_from_records(src: str | Path) -> Ontology:
    """Recover the label order stored alongside intervals in a JSONL file."""
    by_index: dict[int, str] = {}
    with open(src, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                by_index[rec["label_index"]] = rec["label_name"]
    return Ontology(by_index[i] for i in sorted(by_index))


def load_aruba(path: str | Path, fraction: float = 0.8) -> tuple[SplitDataset, Ontology, SkipReport]:
    """Parse a raw CASAS log end to end: events, intervals, ontology, split."""
    report = SkipReport()
    events = read_events(path, report)
    intervals = build_intervals(events, report)
    ontology = Ontology.from_intervals(intervals)
    return chronological_split(intervals, fraction), ontology, report
