"""Time-aware Markov baseline.

The next label is drawn from the fallback-resolved transition vector of the
last finished activity, the day of week and the 15-minute slot; its duration
is the training median for that label and day.

Random draws use numpy's PCG64 bit generator seeded through a
``SeedSequence([seed, *stream])``; one uniform double per step is mapped
through the cumulative distribution of the nonzero entries in label-index
order, so any PCG64 implementation replays the same trace.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, NoPriorError
from .ingest import ActivityInterval, Weekday
from .priors import DurationLevel, Priors, TransitionLevel, slot_index

RNG_ALGORITHM = "numpy.PCG64/SeedSequence"


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, *stream)``, e.g. ``make_rng(42, day_index)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    support = np.flatnonzero(probs > 0)
    cdf = np.cumsum(probs[support])
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return int(support[min(k, len(support) - 1)])


@dataclass(frozen=True)
class BaselinePrediction:
    label: str
    duration_minutes: float
    transition_level_used: TransitionLevel
    duration_level_used: DurationLevel
    rng_seed: int | None = None


def predict_next_baseline(
    priors: Priors,
    prev_label: str,
    day: Weekday,
    slot: int,
    rng: np.random.Generator,
    seed: int | None = None,
) -> BaselinePrediction:
    probs, t_level = priors.transition(prev_label, day, slot)
    label = priors.ontology.name(sample_index(probs, rng))
    minutes, d_level = priors.duration(label, day)
    return BaselinePrediction(label, minutes, t_level, d_level, seed)


def predict_next_argmax(priors: Priors, prev_label: str, day: Weekday, slot: int) -> BaselinePrediction:
    """Most probable successor; ties go to the lowest label index."""
    probs, t_level = priors.transition(prev_label, day, slot)
    label = priors.ontology.name(int(np.argmax(probs)))
    minutes, d_level = priors.duration(label, day)
    return BaselinePrediction(label, minutes, t_level, d_level)


def advance(clock: datetime, minutes: float) -> datetime:
    return clock + timedelta(minutes=minutes)


def clock_minutes(clock: datetime) -> float:
    return clock.hour * 60 + clock.minute + (clock.second + clock.microsecond / 1e6) / 60


class RolloutStep(NamedTuple):
    label: str
    start: datetime
    duration_minutes: float

    @property
    def end(self) -> datetime:
        return advance(self.start, self.duration_minutes)


def _last_label(history: Sequence[str | ActivityInterval]) -> str:
    last = history[-1]
    return last.label if isinstance(last, ActivityInterval) else last


def rollout_baseline(
    priors: Priors,
    seed_history: Sequence[str | ActivityInterval],
    day_start_clock: datetime,
    day_end_clock: datetime,
    rng: np.random.Generator | None = None,
    *,
    greedy: bool = False,
    max_steps: int = 10_000,
) -> list[RolloutStep]:
    """Chain baseline predictions from ``day_start_clock`` until the clock reaches ``day_end_clock``.

    Durations are kept as predicted; the last step may run past the end and is
    truncated when the rollout is expanded into a timeline. ``greedy`` swaps
    sampling for the argmax successor (used to mirror the mock backend).
    """
    if not seed_history:
        raise ConfigError("rollout needs at least one finished activity in the history")
    if day_end_clock < day_start_clock:
        raise ConfigError(f"rollout horizon is negative: {day_start_clock} -> {day_end_clock}")
    if rng is None and not greedy:
        raise ConfigError("sampling rollout needs an explicitly seeded rng")
    prev = _last_label(seed_history)
    clock = day_start_clock
    steps: list[RolloutStep] = []
    while clock < day_end_clock:
        if len(steps) >= max_steps:
            raise RuntimeError(f"rollout exceeded {max_steps} steps at {clock}")
        day, slot = Weekday.of(clock), slot_index(clock_minutes(clock))
        try:
            if greedy:
                pred = predict_next_argmax(priors, prev, day, slot)
            else:
                pred = predict_next_baseline(priors, prev, day, slot, rng)
        except NoPriorError as exc:
            raise NoPriorError(f"rollout dead end after {len(steps)} steps at {clock}: {exc}") from exc
        steps.append(RolloutStep(pred.label, clock, pred.duration_minutes))
        clock = advance(clock, pred.duration_minutes)
        prev = pred.label
    return steps
