"""Prompt assembly and structured-output parsing.

The query context is wrapped in ``<<<QUERY`` / ``QUERY>>>`` markers and each
demonstration context in ``<<<CONTEXT`` / ``CONTEXT>>>``. The mock backend
relies on the query markers (see :func:`extract_query`), so they are part of
the contract and must not change without updating both sides.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import ConfigError, RoutinecastError
from .ingest import ActivityLabel, Ontology, Weekday, canonical_label
from .retrieval import HISTORY_WINDOW, DemonstrationSet, InstanceContext

QUERY_OPEN, QUERY_CLOSE = "<<<QUERY", "QUERY>>>"
DEMO_OPEN, DEMO_CLOSE = "<<<CONTEXT", "CONTEXT>>>"
MAX_REGENERATIONS = 3

SYSTEM_INSTRUCTION = (
    "You forecast daily routines in a smart home. Given the time, the resident's most recent "
    "completed activities and background about the resident and the home, predict the next "
    "activity the resident will start and how many minutes it will last. Choose the activity "
    "only from the allowed list below."
)
OUTPUT_SCHEMA_NOTE = (
    'Respond with exactly one JSON object and nothing else: {"next_activity": <INDEX from the '
    'allowed list>, "duration_minutes": <positive number>}'
)


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _resource(name: str) -> str:
    return resources.files("routinecast.resources").joinpath(name).read_text(encoding="utf-8")


@dataclass(frozen=True)
class TextBlock:
    """Versioned free text (template, persona or spatial description)."""

    text: str
    name: str = ""

    def __post_init__(self):
        if not self.text.strip():
            raise ConfigError(f"{self.name or 'text block'} must not be empty")

    @property
    def content_hash(self) -> str:
        return _sha256(self.text)

    @classmethod
    def from_file(cls, path: str | Path, name: str = "") -> "TextBlock":
        return cls(Path(path).read_text(encoding="utf-8"), name or Path(path).name)


def default_template() -> TextBlock:
    return TextBlock(_resource("prompt_template.txt"), "prompt_template")


def default_persona() -> TextBlock:
    return TextBlock(_resource("persona_aruba.txt").strip(), "persona")


def default_spatial() -> TextBlock:
    return TextBlock(_resource("spatial_aruba.txt").strip(), "spatial")


@dataclass(frozen=True)
class PromptBundle:
    system_instruction: str
    ontology_lines: tuple[str, ...]
    demonstrations: tuple[str, ...]
    context_block: str
    persona: str
    spatial: str
    output_schema_note: str
    text: str


def render_context(ctx: InstanceContext) -> str:
    lines = []
    if ctx.date is not None:
        lines.append(f"Date: {ctx.date.isoformat()}")
    lines.append(f"Day of week: {ctx.day_of_week.long}")
    lines.append(f"Local time: {ctx.clock}")
    lines.append("Recent activities (oldest first):")
    if ctx.recent_history:
        lines.extend(f"{i}. {label}, {minutes:.1f} min" for i, (label, minutes) in enumerate(ctx.recent_history, 1))
    else:
        lines.append("(none)")
    if ctx.recent_history:
        lines.append(f"Last finished activity: {ctx.recent_history[-1][0]}")
    return "\n".join(lines)


def render_answer(index: int, duration_minutes: float) -> str:
    return json.dumps({"next_activity": index, "duration_minutes": duration_minutes})


def render_demonstration(number: int, demo: InstanceContext, ontology: Ontology) -> str:
    if not demo.has_target:
        raise ConfigError(f"demonstration {demo.instance_id or number} has no target")
    answer = render_answer(ontology.index(demo.target_label), round(demo.target_duration, 1))
    return f"--- Example {number} ---\n{DEMO_OPEN}\n{render_context(demo)}\n{DEMO_CLOSE}\nAnswer: {answer}"


def assemble_prompt(
    demos: DemonstrationSet,
    ctx: InstanceContext,
    ontology: Ontology,
    persona: TextBlock | None = None,
    spatial: TextBlock | None = None,
    template: TextBlock | None = None,
) -> PromptBundle:
    """Lay out system instruction, ontology, persona, layout, demonstrations and query.

    Pure: identical inputs give byte-identical text.
    """
    if len(ontology) == 0:
        raise ConfigError("ontology is empty")
    if len(ctx.recent_history) > HISTORY_WINDOW:
        raise ConfigError("query history longer than the window")
    persona = persona or default_persona()
    spatial = spatial or default_spatial()
    template = template or default_template()

    ontology_lines = tuple(ontology.lines())
    blocks = tuple(render_demonstration(i, d, ontology) for i, d in enumerate(demos.items, 1))
    query = f"{QUERY_OPEN}\n{render_context(ctx)}\n{QUERY_CLOSE}"
    text = string.Template(template.text).substitute(
        system_instruction=SYSTEM_INSTRUCTION,
        ontology="\n".join(ontology_lines),
        persona=persona.text,
        spatial=spatial.text,
        demonstrations="\n\n".join(blocks) if blocks else "(none)",
        query=query,
        output_schema_note=OUTPUT_SCHEMA_NOTE,
    )
    return PromptBundle(
        system_instruction=SYSTEM_INSTRUCTION,
        ontology_lines=ontology_lines,
        demonstrations=blocks,
        context_block=query,
        persona=persona.text,
        spatial=spatial.text,
        output_schema_note=OUTPUT_SCHEMA_NOTE,
        text=text,
    )


@dataclass(frozen=True)
class QueryInfo:
    day_of_week: Weekday
    local_minutes: int
    history: tuple[str, ...]

    @property
    def last_label(self) -> str:
        return self.history[-1]


_QUERY_RE = re.compile(re.escape(QUERY_OPEN) + r"\n(.*?)\n" + re.escape(QUERY_CLOSE), re.S)
_HISTORY_RE = re.compile(r"^\d+\. (\S+), ")


def extract_query(prompt_text: str) -> QueryInfo:
    """Recover day, clock and history labels from the query block; ``ValueError`` if absent."""
    found = _QUERY_RE.findall(prompt_text)
    if len(found) != 1:
        raise ValueError(f"expected exactly one query block, found {len(found)}")
    fields: dict[str, str] = {}
    history: list[str] = []
    for line in found[0].splitlines():
        m = _HISTORY_RE.match(line)
        if m:
            history.append(m.group(1))
        elif ": " in line:
            key, value = line.split(": ", 1)
            fields[key] = value
    try:
        day = Weekday.parse(fields["Day of week"])
        hh, mm = fields["Local time"].split(":")
        minutes = int(hh) * 60 + int(mm)
    except (KeyError, ValueError) as exc:
        raise ValueError(f"query block missing temporal fields: {exc}") from None
    if not history:
        raise ValueError("query block has no activity history")
    return QueryInfo(day, minutes, tuple(history))


# -- structured output -----------------------------------------------------------


class PredictionError(RoutinecastError, ValueError):
    """Model output that cannot be turned into a prediction."""


class MalformedOutput(PredictionError):
    pass


class UnknownLabel(PredictionError):
    pass


class NonpositiveDuration(PredictionError):
    pass


@dataclass(frozen=True)
class Prediction:
    next_activity: ActivityLabel
    duration_minutes: float
    raw_text: str = ""
    parse_attempts: int = 1


def render_prediction(pred: Prediction) -> str:
    return render_answer(pred.next_activity.index, pred.duration_minutes)


def _resolve_label(value: object, ontology: Ontology) -> ActivityLabel:
    if isinstance(value, bool):
        raise MalformedOutput(f"next_activity must be an index or name, got {value!r}")
    if isinstance(value, int):
        if 0 <= value < len(ontology):
            return ActivityLabel(value, ontology.name(value))
        raise UnknownLabel(f"activity index {value} outside 0..{len(ontology) - 1}")
    if isinstance(value, str):
        text = value.strip()
        if text.isdigit():
            return _resolve_label(int(text), ontology)
        name = canonical_label(text)
        if name in ontology:
            return ontology.label(name)
        raise UnknownLabel(f"unknown activity {value!r}")
    raise MalformedOutput(f"next_activity must be an index or name, got {type(value).__name__}")


def parse_prediction(raw_text: str, ontology: Ontology, attempts: int = 1) -> Prediction:
    """Validate ``{"next_activity": index|name, "duration_minutes": number}``."""
    try:
        doc = json.loads(raw_text.strip())
    except (json.JSONDecodeError, AttributeError) as exc:
        raise MalformedOutput(f"not a JSON document: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedOutput("expected a JSON object")
    missing = {"next_activity", "duration_minutes"} - doc.keys()
    if missing:
        raise MalformedOutput(f"missing fields: {sorted(missing)}")
    label = _resolve_label(doc["next_activity"], ontology)
    minutes = doc["duration_minutes"]
    if isinstance(minutes, bool) or not isinstance(minutes, (int, float)):
        raise MalformedOutput(f"duration_minutes must be a number, got {minutes!r}")
    minutes = float(minutes)
    if not math.isfinite(minutes):
        raise MalformedOutput("duration_minutes must be finite")
    if minutes <= 0:
        raise NonpositiveDuration(f"duration_minutes must be positive, got {minutes}")
    return Prediction(label, minutes, raw_text, attempts)
