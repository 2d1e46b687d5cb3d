"""Scoring: classification aggregates, duration errors, joint success and DTW."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Hashable, Iterable, Protocol, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, OverlapError

GAP = "<gap>"
INVALID = "<invalid>"
GAP_POLICIES = ("keep", "drop")

_MINUTE_US = 60_000_000
_US = timedelta(microseconds=1)


@dataclass(frozen=True)
class LabeledPair:
    truth_label: str
    pred_label: str  # INVALID when the model never produced a parseable answer
    truth_duration: float
    pred_duration: float
    duration_valid: bool = True

    @property
    def error(self) -> float:
        return self.pred_duration - self.truth_duration


@dataclass(frozen=True)
class ClassConfusion:
    tp: int
    fp: int
    fn: int
    support: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass(frozen=True)
class ClassificationReport:
    n: int
    accuracy: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    per_class: dict[str, ClassConfusion] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "per_class"}
        out["per_class"] = {
            name: {
                "tp": c.tp, "fp": c.fp, "fn": c.fn, "support": c.support,
                "precision": c.precision, "recall": c.recall, "f1": c.f1,
            }
            for name, c in sorted(self.per_class.items())
        }
        return out


def classification_report(pairs: Sequence[LabeledPair]) -> ClassificationReport:
    """Per-class confusion plus micro, macro and support-weighted averages.

    Classes are the union of true and (valid) predicted labels. A class that is
    never predicted has precision 0. Unparseable predictions carry no class of
    their own but still count as global false positives, so the micro scores
    stay equal to accuracy.
    """
    if not pairs:
        raise DegenerateInputError("classification report needs at least one pair")
    truth = Counter(p.truth_label for p in pairs)
    predicted = Counter(p.pred_label for p in pairs)
    hits = Counter(p.truth_label for p in pairs if p.truth_label == p.pred_label)
    classes = sorted((set(truth) | set(predicted)) - {INVALID})
    per_class = {
        c: ClassConfusion(tp=hits[c], fp=predicted[c] - hits[c], fn=truth[c] - hits[c], support=truth[c])
        for c in classes
    }
    n = len(pairs)
    tp = sum(hits.values())
    fp = n - tp  # every wrong prediction is a false positive for some (possibly invalid) class
    fn = n - tp
    micro_p = tp / (tp + fp)
    micro_r = tp / (tp + fn)
    micro_f1 = 2 * tp / (2 * tp + fp + fn)  # count form, exact on integers

    k = len(classes)
    weights = [per_class[c].support / n for c in classes]

    def macro(attr: str) -> float:
        return sum(getattr(per_class[c], attr) for c in classes) / k

    def weighted(attr: str) -> float:
        return sum(w * getattr(per_class[c], attr) for w, c in zip(weights, classes))

    return ClassificationReport(
        n=n,
        accuracy=tp / n,
        micro_precision=micro_p,
        micro_recall=micro_r,
        micro_f1=micro_f1,
        macro_precision=macro("precision"),
        macro_recall=macro("recall"),
        macro_f1=macro("f1"),
        weighted_precision=weighted("precision"),
        weighted_recall=weighted("recall"),
        weighted_f1=weighted("f1"),
        per_class=per_class,
    )


@dataclass(frozen=True)
class DurationReport:
    mae: float
    rmse: float
    n_valid: int

    def to_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "n_valid": self.n_valid}


def duration_report(pairs: Iterable[LabeledPair]) -> DurationReport:
    errors = np.array([p.error for p in pairs if p.duration_valid], dtype=float)
    if errors.size == 0:
        raise DegenerateInputError("no valid duration predictions to score")
    return DurationReport(
        mae=float(np.mean(np.abs(errors))),
        rmse=float(np.sqrt(np.mean(errors**2))),
        n_valid=int(errors.size),
    )


def joint_success(pairs: Sequence[LabeledPair], tolerance_minutes: float) -> float:
    """Fraction with the right label and ``|duration error| <= tolerance``."""
    if tolerance_minutes <= 0:
        raise ConfigError(f"tolerance must be positive, got {tolerance_minutes}")
    if not pairs:
        raise DegenerateInputError("joint success needs at least one pair")
    ok = sum(
        1
        for p in pairs
        if p.duration_valid and p.pred_label == p.truth_label and abs(p.error) <= tolerance_minutes
    )
    return ok / len(pairs)


# -- timelines and DTW -----------------------------------------------------------


class _Span(Protocol):
    label: str
    start: datetime

    @property
    def end(self) -> datetime: ...


@dataclass(frozen=True)
class DailyTimeline:
    day_id: str
    start: datetime
    labels: tuple[str, ...]

    @property
    def t_day(self) -> int:
        return len(self.labels)

    def minutes_by_label(self) -> Counter:
        return Counter(self.labels)


def _ceil_minutes(us: int) -> int:
    return -(-us // _MINUTE_US)


def expand_timeline(
    intervals: Iterable[_Span], span_start: datetime, span_end: datetime, day_id: str = ""
) -> DailyTimeline:
    """One label per minute of ``[span_start, span_end)``.

    Minute ``m`` starts at ``span_start + m`` minutes and takes the label of the
    interval whose half-open span ``[start, end)`` contains that instant;
    uncovered minutes get :data:`GAP`.
    """
    if span_end <= span_start:
        raise ConfigError(f"empty timeline span {span_start} -> {span_end}")
    total = _ceil_minutes((span_end - span_start) // _US)
    labels = [GAP] * total
    prev_end: datetime | None = None
    for iv in sorted(intervals, key=lambda x: x.start):
        lo, hi = max(iv.start, span_start), min(iv.end, span_end)
        if hi <= lo:
            continue
        if prev_end is not None and lo < prev_end:
            raise OverlapError(f"interval {iv.label} at {iv.start} overlaps the previous one")
        prev_end = hi
        m_lo = _ceil_minutes((lo - span_start) // _US)
        m_hi = _ceil_minutes((hi - span_start) // _US)
        labels[m_lo:m_hi] = [iv.label] * (m_hi - m_lo)
    return DailyTimeline(day_id, span_start, tuple(labels))


def apply_gap_policy(truth: DailyTimeline, pred: DailyTimeline, policy: str) -> tuple[DailyTimeline, DailyTimeline]:
    """``keep`` leaves both timelines alone; ``drop`` removes the minutes where the truth is GAP from both."""
    if policy not in GAP_POLICIES:
        raise ConfigError(f"unknown gap policy {policy!r}")
    if policy == "keep":
        return truth, pred
    if truth.t_day != pred.t_day:
        raise ConfigError("gap dropping needs minute-aligned timelines of equal length")
    keep = [i for i, lab in enumerate(truth.labels) if lab != GAP]
    return (
        DailyTimeline(truth.day_id, truth.start, tuple(truth.labels[i] for i in keep)),
        DailyTimeline(pred.day_id, pred.start, tuple(pred.labels[i] for i in keep)),
    )


@dataclass(frozen=True)
class DtwResult:
    raw: int
    normalized: float
    t_day: int


def _encode(a: Sequence[Hashable], b: Sequence[Hashable]) -> tuple[np.ndarray, np.ndarray]:
    codes: dict[Hashable, int] = {}
    ea = np.fromiter((codes.setdefault(x, len(codes)) for x in a), dtype=np.int64, count=len(a))
    eb = np.fromiter((codes.setdefault(x, len(codes)) for x in b), dtype=np.int64, count=len(b))
    return ea, eb


def dtw_distance(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Full-table DTW with 0/1 mismatch cost and steps (1,0), (0,1), (1,1).

    Row ``i`` is solved in vector form: with ``t_j = c_j + min(D[i-1][j], D[i-1][j-1])``
    and ``C_j`` the running sum of the row costs,
    ``D[i][j] = C_j + min_{k<=j}(t_k - C_k)``.
    """
    if len(a) == 0 or len(b) == 0:
        raise DegenerateInputError("DTW needs two nonempty sequences")
    ea, eb = _encode(a, b)
    big = np.int64(1 << 40)
    prev = np.full(len(eb) + 1, big, dtype=np.int64)
    prev[0] = 0  # D[-1][-1]
    for code in ea:
        cost = (eb != code).astype(np.int64)
        t = cost + np.minimum(prev[1:], prev[:-1])
        csum = np.cumsum(cost)
        row = csum + np.minimum.accumulate(t - csum)
        prev = np.empty_like(prev)
        prev[0] = big
        prev[1:] = row
    return int(prev[-1])


def dtw(truth: DailyTimeline | Sequence[str], pred: DailyTimeline | Sequence[str]) -> DtwResult:
    """Raw DTW in minutes and the same value divided by the truth timeline length."""
    a = truth.labels if isinstance(truth, DailyTimeline) else tuple(truth)
    b = pred.labels if isinstance(pred, DailyTimeline) else tuple(pred)
    raw = dtw_distance(a, b)
    return DtwResult(raw, raw / len(a), len(a))


def hamming(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    if len(a) != len(b):
        raise ValueError("hamming distance needs equal lengths")
    return sum(x != y for x, y in zip(a, b))

