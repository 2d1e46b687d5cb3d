"""Synthetic single-resident logs in the CASAS Aruba line format.

Used for offline tests and demos. The generated routine follows the Aruba
activity vocabulary (11 annotated classes including Leave_Home/Enter_Home),
interleaves unannotated motion, door and temperature readings, mixes
timestamps with and without fractional seconds, and can inject the usual
annotation faults: dropped end markers, stray end markers and garbled lines.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from datetime import date, datetime, time, timedelta
from pathlib import Path

ARUBA_ACTIVITIES = (
    "Meal_Preparation",
    "Relax",
    "Eating",
    "Work",
    "Sleeping",
    "Wash_Dishes",
    "Bed_to_Toilet",
    "Enter_Home",
    "Leave_Home",
    "Housekeeping",
    "Resperate",
)

_SENSORS = {
    "Meal_Preparation": ("M015", "M019"),
    "Eating": ("M014", "M016"),
    "Wash_Dishes": ("M015", "M017"),
    "Relax": ("M020", "M009"),
    "Work": ("M026", "M027"),
    "Sleeping": ("M003", "M002"),
    "Bed_to_Toilet": ("M004", "M005"),
    "Housekeeping": ("M010", "M021"),
    "Resperate": ("M007", "M006"),
    "Leave_Home": ("D004", "M030"),
    "Enter_Home": ("D004", "M030"),
}


@dataclass
class _Activity:
    label: str
    start: datetime
    end: datetime


def _minutes(rng: random.Random, lo: float, hi: float) -> timedelta:
    return timedelta(minutes=rng.uniform(lo, hi))


def _day_plan(rng: random.Random, day: date, wake: datetime) -> tuple[list[_Activity], datetime]:
    """Activities from ``wake`` to bedtime; returns them and the next morning's wake time."""
    acts: list[_Activity] = []
    clock = wake

    def add(label: str, lo: float, hi: float, gap: tuple[float, float] = (1, 12)) -> None:
        nonlocal clock
        clock += _minutes(rng, *gap)
        end = clock + _minutes(rng, lo, hi)
        acts.append(_Activity(label, clock, end))
        clock = end

    def outing(lo: float, hi: float) -> None:
        nonlocal clock
        add("Leave_Home", 0.3, 1.5)
        clock += _minutes(rng, lo, hi)
        add("Enter_Home", 0.3, 1.5, gap=(0, 0))

    weekday = day.weekday() < 5
    if rng.random() < 0.5:
        add("Bed_to_Toilet", 2, 6, gap=(0, 3))
    add("Meal_Preparation", 8, 20)
    add("Eating", 10, 25)
    if rng.random() < 0.6:
        add("Wash_Dishes", 4, 12)
    add("Relax", 20, 80)
    if weekday and rng.random() < 0.75:
        add("Work", 60, 170)
    elif day.weekday() == 5 and rng.random() < 0.6:
        add("Housekeeping", 30, 90)
    if rng.random() < 0.6:
        outing(60, 200)
    add("Meal_Preparation", 10, 25)
    add("Eating", 15, 30)
    add("Relax", 30, 110)
    if rng.random() < 0.15:
        add("Resperate", 10, 20)
    if rng.random() < 0.35:
        outing(40, 150)
    if weekday and rng.random() < 0.4:
        add("Work", 30, 110)
    add("Meal_Preparation", 20, 45)
    add("Eating", 20, 40)
    if rng.random() < 0.7:
        add("Wash_Dishes", 5, 15)
    add("Relax", 60, 170)

    bedtime = datetime.combine(day, time(22, 15)) + _minutes(rng, 0, 75)
    clock = max(clock + _minutes(rng, 2, 10), bedtime)
    next_wake = datetime.combine(day + timedelta(days=1), time(6, 0)) + _minutes(rng, -20, 80)
    breaks = rng.choice((0, 0, 1, 1, 2))
    segments = breaks + 1
    span = (next_wake - clock) / segments
    for k in range(segments):
        seg_end = clock + span if k < segments - 1 else next_wake
        if k < segments - 1:
            toilet = _minutes(rng, 2, 6)
            acts.append(_Activity("Sleeping", clock, seg_end - toilet - timedelta(minutes=1)))
            acts.append(_Activity("Bed_to_Toilet", seg_end - toilet, seg_end))
            clock = seg_end + timedelta(seconds=rng.uniform(20, 90))
        else:
            acts.append(_Activity("Sleeping", clock, seg_end))
    return acts, next_wake + _minutes(rng, 0.5, 3)


def _stamp(rng: random.Random, when: datetime) -> str:
    if rng.random() < 0.1:
        return when.strftime("%Y-%m-%d %H:%M:%S")
    return when.isoformat(sep=" ", timespec="microseconds")


def generate_log(
    days: int = 219,
    seed: int = 0,
    start: date = date(2010, 11, 4),
    faults: bool = True,
) -> list[str]:
    """Lines of a synthetic log covering ``days`` calendar days."""
    rng = random.Random(seed)
    acts: list[_Activity] = []
    wake = datetime.combine(start, time(0, 0)) + _minutes(rng, 0, 5)
    # the first record opens mid-sleep, like a real deployment starting at midnight
    first_wake = datetime.combine(start, time(6, 30))
    acts.append(_Activity("Sleeping", wake, first_wake))
    wake = first_wake + timedelta(minutes=2)
    for offset in range(days):
        day = start + timedelta(days=offset)
        plan, wake = _day_plan(rng, day, wake)
        acts.extend(plan)
    horizon = datetime.combine(start + timedelta(days=days), time(0, 0))

    records: list[tuple[datetime, int, str]] = []  # (time, tiebreak, line-without-stamp)
    seq = 0

    def emit(when: datetime, body: str) -> None:
        nonlocal seq
        if when < horizon:
            records.append((when, seq, body))
            seq += 1

    for act in acts:
        s_on, s_off = _SENSORS[act.label]
        on, off = ("OPEN", "CLOSE") if s_on.startswith("D") else ("ON", "OFF")
        drop_end = faults and rng.random() < 0.004
        emit(act.start, f"{s_on} {on} {act.label} begin")
        inner = act.start
        while True:
            inner += _minutes(rng, 3, 25)
            if inner >= act.end:
                break
            emit(inner, f"{s_off} {rng.choice(('ON', 'OFF'))}")
        if not drop_end:
            emit(act.end, f"{s_off} {off} {act.label} end")
        if faults and rng.random() < 0.002:
            emit(act.end + timedelta(seconds=5), f"{s_off} OFF {act.label} end")

    clock = datetime.combine(start, time(0, 0))
    while clock < horizon:
        emit(clock, f"T00{rng.randint(1, 5)} {rng.uniform(18, 26):.1f}")
        if rng.random() < 0.5:
            emit(clock + _minutes(rng, 0, 30), f"M0{rng.randint(10, 31)} {rng.choice(('ON', 'OFF'))}")
        clock += _minutes(rng, 20, 60)

    records.sort(key=lambda r: (r[0], r[1]))
    lines = [f"{_stamp(rng, when)} {body}" for when, _, body in records]
    if faults:
        garbage = ("M012 ON", "2010-13-45 99:00:00 M001 ON", "\t", "2011-01-01 10:00:00.0 M001 ON Relax")
        for k in range(max(1, len(lines) // 5000)):
            pos = rng.randrange(len(lines))
            lines.insert(pos, garbage[k % len(garbage)])
    return lines


def write_log(path: str | Path, days: int = 219, seed: int = 0, faults: bool = True) -> Path:
    path = Path(path)
    path.write_text("\n".join(generate_log(days, seed, faults=faults)) + "\n", encoding="utf-8")
    return path
