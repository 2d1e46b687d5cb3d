"""Slot-stratified transition priors and median-duration priors.

Both are estimated from the training split only. Transition counts are
credited at three levels at once, keyed by the previous label and by the
*successor's* start time:

* slot    -- (prev, day of week, 15-minute slot)
* day     -- (prev, day of week)
* overall -- (prev,)

Lookups fall back slot -> day -> overall for transitions and
(activity, day) -> activity for durations.
"""

from __future__ import annotations

import hashlib
import json
import statistics
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, NoPriorError
from .ingest import ActivityInterval, Ontology, Weekday

SLOT_MINUTES = 15
SLOTS_PER_DAY = 24 * 60 // SLOT_MINUTES
PRIORS_FORMAT = "routinecast-priors/1"


class TransitionLevel(str, Enum):
    SLOT = "slot"
    DAY = "day"
    OVERALL = "overall"


class DurationLevel(str, Enum):
    ACTIVITY_DOW = "activity_dow"
    GLOBAL = "global"


@dataclass(frozen=True, order=True)
class SlotKey:
    day_of_week: Weekday
    slot_index: int

    def __post_init__(self):
        if not 0 <= self.slot_index < SLOTS_PER_DAY:
            raise ValueError(f"slot index out of range: {self.slot_index}")

    @classmethod
    def of(cls, when: datetime) -> "SlotKey":
        return cls(Weekday.of(when), slot_index(when.hour * 60 + when.minute))


def slot_index(minutes_since_midnight: float) -> int:
    return min(int(minutes_since_midnight // SLOT_MINUTES), SLOTS_PER_DAY - 1)


def _normalize(counts: np.ndarray) -> np.ndarray:
    return counts / counts.sum()


@dataclass
class TransitionPriors:
    ontology: Ontology
    slot_counts: dict[tuple[str, Weekday, int], np.ndarray]
    day_counts: dict[tuple[str, Weekday], np.ndarray]
    overall_counts: dict[str, np.ndarray]

    def __post_init__(self):
        self.slot_level = {k: _normalize(v) for k, v in self.slot_counts.items()}
        self.day_level = {k: _normalize(v) for k, v in self.day_counts.items()}
        self.overall = {k: _normalize(v) for k, v in self.overall_counts.items()}


@dataclass
class DurationPriors:
    by_activity_dow: dict[tuple[str, Weekday], float]
    global_: dict[str, float]
    counts_by_activity_dow: dict[tuple[str, Weekday], int]
    counts_global: dict[str, int]


@dataclass
class Priors:
    """Transition and duration priors sharing one ontology."""

    ontology: Ontology
    transitions: TransitionPriors
    durations: DurationPriors

    def transition(self, prev_label: str, day: Weekday, slot: int) -> tuple[np.ndarray, TransitionLevel]:
        return lookup_transition(self.transitions, prev_label, day, slot)

    def duration(self, label: str, day: Weekday) -> tuple[float, DurationLevel]:
        return lookup_duration(self.durations, label, day)

    def to_dict(self) -> dict:
        return priors_to_dict(self)

    def content_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def estimate_transitions(train: Sequence[ActivityInterval], ontology: Ontology) -> TransitionPriors:
    if len(train) < 2:
        raise DegenerateInputError(f"need at least 2 training intervals, got {len(train)}")
    size = len(ontology)
    slot: dict = defaultdict(lambda: np.zeros(size, dtype=np.int64))
    day: dict = defaultdict(lambda: np.zeros(size, dtype=np.int64))
    overall: dict = defaultdict(lambda: np.zeros(size, dtype=np.int64))
    for prev, nxt in zip(train, train[1:]):
        key = SlotKey.of(nxt.start)
        j = ontology.index(nxt.label)
        slot[prev.label, key.day_of_week, key.slot_index][j] += 1
        day[prev.label, key.day_of_week][j] += 1
        overall[prev.label][j] += 1
    return TransitionPriors(ontology, dict(slot), dict(day), dict(overall))


def estimate_duration_medians(train: Sequence[ActivityInterval]) -> DurationPriors:
    """Median minutes per (activity, day of week) and per activity.

    Even-sized groups take the mean of the two middle values.
    """
    if not train:
        raise DegenerateInputError("cannot estimate durations from an empty training set")
    by_key: dict[tuple[str, Weekday], list[float]] = defaultdict(list)
    by_label: dict[str, list[float]] = defaultdict(list)
    for iv in train:
        by_key[iv.label, iv.day_of_week].append(iv.duration_minutes)
        by_label[iv.label].append(iv.duration_minutes)
    return DurationPriors(
        {k: statistics.median(v) for k, v in by_key.items()},
        {k: statistics.median(v) for k, v in by_label.items()},
        {k: len(v) for k, v in by_key.items()},
        {k: len(v) for k, v in by_label.items()},
    )


def estimate_priors(train: Sequence[ActivityInterval], ontology: Ontology) -> Priors:
    return Priors(ontology, estimate_transitions(train, ontology), estimate_duration_medians(train))


def lookup_transition(
    priors: TransitionPriors, prev_label: str, day: Weekday, slot: int
) -> tuple[np.ndarray, TransitionLevel]:
    vec = priors.slot_level.get((prev_label, day, slot))
    if vec is not None:
        return vec, TransitionLevel.SLOT
    vec = priors.day_level.get((prev_label, day))
    if vec is not None:
        return vec, TransitionLevel.DAY
    vec = priors.overall.get(prev_label)
    if vec is not None:
        return vec, TransitionLevel.OVERALL
    raise NoPriorError(f"no transition statistics for {prev_label!r}")


def lookup_duration(priors: DurationPriors, label: str, day: Weekday) -> tuple[float, DurationLevel]:
    minutes = priors.by_activity_dow.get((label, day))
    if minutes is not None:
        return minutes, DurationLevel.ACTIVITY_DOW
    minutes = priors.global_.get(label)
    if minutes is not None:
        return minutes, DurationLevel.GLOBAL
    raise NoPriorError(f"no duration statistics for {label!r}")


# -- serialization --------------------------------------------------------------


def priors_to_dict(priors: Priors) -> dict:
    tp, dp = priors.transitions, priors.durations

    def row(counts: np.ndarray) -> dict:
        return {"counts": counts.tolist(), "probs": _normalize(counts).tolist()}

    return {
        "format": PRIORS_FORMAT,
        "ontology": list(priors.ontology.names),
        "slot_level": [
            {"prev": p, "day": d.short, "slot": s, **row(c)}
            for (p, d, s), c in sorted(tp.slot_counts.items(), key=lambda kv: (kv[0][0], int(kv[0][1]), kv[0][2]))
        ],
        "day_level": [
            {"prev": p, "day": d.short, **row(c)}
            for (p, d), c in sorted(tp.day_counts.items(), key=lambda kv: (kv[0][0], int(kv[0][1])))
        ],
        "overall": [{"prev": p, **row(c)} for p, c in sorted(tp.overall_counts.items())],
        "duration_by_activity_dow": [
            {"label": a, "day": d.short, "median_minutes": m, "count": dp.counts_by_activity_dow[a, d]}
            for (a, d), m in sorted(dp.by_activity_dow.items(), key=lambda kv: (kv[0][0], int(kv[0][1])))
        ],
        "duration_global": [
            {"label": a, "median_minutes": m, "count": dp.counts_global[a]} for a, m in sorted(dp.global_.items())
        ],
    }


def priors_from_dict(doc: dict) -> Priors:
    if doc.get("format") != PRIORS_FORMAT:
        raise ValueError(f"unsupported priors format: {doc.get('format')!r}")
    ontology = Ontology(doc["ontology"])

    def arr(rec: dict) -> np.ndarray:
        return np.asarray(rec["counts"], dtype=np.int64)

    transitions = TransitionPriors(
        ontology,
        {(r["prev"], Weekday.parse(r["day"]), r["slot"]): arr(r) for r in doc["slot_level"]},
        {(r["prev"], Weekday.parse(r["day"])): arr(r) for r in doc["day_level"]},
        {r["prev"]: arr(r) for r in doc["overall"]},
    )
    durations = DurationPriors(
        {(r["label"], Weekday.parse(r["day"])): r["median_minutes"] for r in doc["duration_by_activity_dow"]},
        {r["label"]: r["median_minutes"] for r in doc["duration_global"]},
        {(r["label"], Weekday.parse(r["day"])): r["count"] for r in doc["duration_by_activity_dow"]},
        {r["label"]: r["count"] for r in doc["duration_global"]},
    )
    return Priors(ontology, transitions, durations)


def save_priors(priors: Priors, path: str | Path) -> None:
    Path(path).write_text(json.dumps(priors.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_priors(path: str | Path) -> Priors:
    return priors_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
