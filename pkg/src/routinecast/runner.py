"""Experiment orchestration: next-activity prediction and daily rollouts across shot counts."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import statistics
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Sequence

from .backend import AuthError, Backend, BackendError, GenerationRequest, DEFAULT_MODEL
from .baseline import RNG_ALGORITHM, RolloutStep, advance, clock_minutes, make_rng, rollout_baseline
from .errors import ConfigError, RoutinecastError
from .evalmetrics import (
    GAP_POLICIES,
    INVALID,
    LabeledPair,
    apply_gap_policy,
    classification_report,
    dtw,
    duration_report,
    expand_timeline,
    joint_success,
)
from .ingest import ActivityInterval, Ontology, SplitDataset, Weekday
from .priors import Priors
from .promptkit import (
    MAX_REGENERATIONS,
    Prediction,
    PredictionError,
    TextBlock,
    assemble_prompt,
    default_persona,
    default_spatial,
    default_template,
    parse_prediction,
)
from .retrieval import (
    EMPTY_DEMOS,
    HISTORY_WINDOW,
    BuiltinEmbedder,
    Embedder,
    InstanceContext,
    VectorIndex,
    build_index,
    mmr_select,
)

log = logging.getLogger(__name__)

DEFAULT_SHOTS = (0, 1, 2, 3, 4, 5, 10)
DEFAULT_TOLERANCES = (5.0, 10.0, 15.0)
TASKS = ("next", "rollout")
MAX_ROLLOUT_STEPS = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "next"
    shot_counts: tuple[int, ...] = DEFAULT_SHOTS
    backend: str = "mock"
    model: str = DEFAULT_MODEL
    temperature: float = 0.0
    seed: int = 42
    mmr_lambda: float = 0.5
    tolerances: tuple[float, ...] = DEFAULT_TOLERANCES
    history_window: int = HISTORY_WINDOW
    rollout_seed_activities: int = 3
    baseline_seeds: int = 20
    gap_policy: str = "keep"
    embed_backend: str = "builtin"
    max_regenerations: int = MAX_REGENERATIONS
    concurrency: int = 4

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if not self.shot_counts or any(n < 0 for n in self.shot_counts):
            raise ConfigError(f"shot counts must be nonnegative, got {self.shot_counts}")
        if any(t <= 0 for t in self.tolerances):
            raise ConfigError(f"tolerances must be positive, got {self.tolerances}")
        if self.history_window != HISTORY_WINDOW:
            raise ConfigError(f"history window is fixed at {HISTORY_WINDOW}")
        if not 1 <= self.rollout_seed_activities <= HISTORY_WINDOW:
            raise ConfigError("rollout seed activities must be between 1 and the history window")
        if self.gap_policy not in GAP_POLICIES:
            raise ConfigError(f"gap policy must be one of {GAP_POLICIES}")
        if not 0.0 <= self.mmr_lambda <= 1.0:
            raise ConfigError("mmr_lambda must lie in [0, 1]")
        if self.concurrency < 1 or self.baseline_seeds < 0 or self.max_regenerations < 0:
            raise ConfigError("concurrency >= 1, baseline_seeds >= 0 and max_regenerations >= 0 required")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def content_hash(self) -> str:
        return _hash_json(self.to_dict())


def _hash_json(doc: object) -> str:
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class PromptAssets:
    persona: TextBlock = field(default_factory=default_persona)
    spatial: TextBlock = field(default_factory=default_spatial)
    template: TextBlock = field(default_factory=default_template)


@dataclass
class RunReport:
    config: dict
    provenance: dict
    next_activity: dict | None = None
    rollout: dict | None = None
    failures: list = field(default_factory=list)
    meta: dict = field(default_factory=dict, compare=False)  # wall clock and call counts, kept out of report.json

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "provenance": self.provenance,
            "next_activity": self.next_activity,
            "rollout": self.rollout,
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunReport":
        return cls(doc["config"], doc["provenance"], doc.get("next_activity"), doc.get("rollout"), doc.get("failures", []))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


# -- instances -------------------------------------------------------------------


def make_context(
    history: Sequence[ActivityInterval | RolloutStep | tuple[str, float]],
    clock: datetime,
    target: ActivityInterval | None = None,
    instance_id: str = "",
    source: str = "",
) -> InstanceContext:
    pairs = tuple(
        (h[0], float(h[1])) if isinstance(h, tuple) and not isinstance(h, RolloutStep) else (h.label, h.duration_minutes)
        for h in history[-HISTORY_WINDOW:]
    )
    return InstanceContext(
        day_of_week=Weekday.of(clock),
        local_time=clock_minutes(clock),
        recent_history=pairs,
        target_label=target.label if target else None,
        target_duration=target.duration_minutes if target else None,
        date=clock.date(),
        instance_id=instance_id,
        source=source,
    )


def training_instances(train: Sequence[ActivityInterval]) -> list[InstanceContext]:
    """One instance per training boundary with a full history window, queried at the previous end."""
    return [
        make_context(train[i - HISTORY_WINDOW : i], train[i - 1].end, train[i], f"train:{i}", "train")
        for i in range(HISTORY_WINDOW, len(train))
    ]


@dataclass(frozen=True)
class EvalInstances:
    instances: tuple[InstanceContext, ...]
    lacking_history: int
    history_from_train: int


def eval_instances(split: SplitDataset) -> EvalInstances:
    """Boundaries before each evaluation interval; the history may reach into the training split."""
    everything = split.all
    offset = len(split.train)
    out, lacking, reach_back = [], 0, 0
    for j, target in enumerate(split.eval):
        g = offset + j
        if g < HISTORY_WINDOW:
            lacking += 1
            continue
        if g - HISTORY_WINDOW < offset:
            reach_back += 1
        out.append(make_context(everything[g - HISTORY_WINDOW : g], everything[g - 1].end, target, f"eval:{j}", "eval"))
    return EvalInstances(tuple(out), lacking, reach_back)


# -- shared machinery ------------------------------------------------------------


@dataclass
class Pipeline:
    """Everything a single prediction needs, built once per run."""

    config: ExperimentConfig
    ontology: Ontology
    priors: Priors
    backend: Backend
    assets: PromptAssets
    embedder: Embedder
    index: VectorIndex | None
    retrieval_queries: dict = field(default_factory=lambda: defaultdict(int))

    def demonstrations(self, ctx: InstanceContext, n: int, query_vec=None):
        if n == 0:
            return EMPTY_DEMOS
        if self.index is None:
            raise ConfigError("retrieval index required for n > 0")
        if query_vec is None:
            query_vec = self.embedder.embed([ctx])[0]
        self.retrieval_queries[n] += 1
        return mmr_select(self.index, query_vec, n, self.config.mmr_lambda)

    def predict(self, ctx: InstanceContext, n: int, query_vec=None) -> tuple[Prediction | None, list[str], bool]:
        """Prediction (or None after exhausting regenerations), parse error names, demo truncation flag."""
        demos = self.demonstrations(ctx, n, query_vec)
        bundle = assemble_prompt(demos, ctx, self.ontology, self.assets.persona, self.assets.spatial, self.assets.template)
        errors: list[str] = []
        for attempt in range(self.config.max_regenerations + 1):
            request = GenerationRequest(
                bundle.text, self.config.model, self.config.temperature, attempt_index=attempt
            )
            resp = self.backend.generate(request)
            try:
                return parse_prediction(resp.raw_text, self.ontology, attempts=attempt + 1), errors, demos.truncated
            except PredictionError as exc:
                errors.append(type(exc).__name__)
        return None, errors, demos.truncated


def build_pipeline(
    config: ExperimentConfig,
    split: SplitDataset,
    ontology: Ontology,
    priors: Priors,
    backend: Backend,
    assets: PromptAssets | None = None,
    embedder: Embedder | None = None,
) -> Pipeline:
    embedder = embedder or BuiltinEmbedder(ontology)
    index = None
    if any(n > 0 for n in config.shot_counts):
        train_items = training_instances(split.train)
        index = build_index(train_items, embedder)
        if any(item.source != "train" for item in index.items):
            raise RoutinecastError("retrieval index contains non-training instances")
    return Pipeline(config, ontology, priors, backend, assets or PromptAssets(), embedder, index)


def _provenance(config: ExperimentConfig, priors: Priors, assets: PromptAssets, pipeline: Pipeline) -> dict:
    return {
        "config_hash": config.content_hash(),
        "seed": config.seed,
        "rng": RNG_ALGORITHM,
        "template_hash": assets.template.content_hash,
        "persona_hash": assets.persona.content_hash,
        "spatial_hash": assets.spatial.content_hash,
        "priors_hash": priors.content_hash(),
        "backend_id": pipeline.backend.backend_id,
        "embed_backend_id": pipeline.embedder.backend_id,
        "ontology": list(pipeline.ontology.names),
    }


def _median(values: list[float]) -> float | None:
    return statistics.median(values) if values else None


# -- next-activity task -------------------------------------------------------------


def run_next_activity(
    config: ExperimentConfig,
    split: SplitDataset,
    ontology: Ontology,
    priors: Priors,
    backend: Backend,
    assets: PromptAssets | None = None,
    embedder: Embedder | None = None,
    pipeline: Pipeline | None = None,
) -> RunReport:
    started = time.perf_counter()
    pipe = pipeline or build_pipeline(config, split, ontology, priors, backend, assets, embedder)
    ev = eval_instances(split)
    instances = ev.instances
    query_vecs = pipe.embedder.embed(instances) if any(n > 0 for n in config.shot_counts) and instances else None

    per_shot: dict[str, dict] = {}
    failures: list[dict] = []
    for n in config.shot_counts:

        def work(k: int):
            ctx = instances[k]
            try:
                return pipe.predict(ctx, n, None if query_vecs is None else query_vecs[k])
            except AuthError:
                raise
            except BackendError as exc:
                return exc

        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            outcomes = list(pool.map(work, range(len(instances))))

        pairs: list[LabeledPair] = []
        parse_failures = regenerations = truncated = backend_failures = 0
        for ctx, outcome in zip(instances, outcomes):
            if isinstance(outcome, BackendError):
                backend_failures += 1
                failures.append({"task": "next", "shots": n, "instance": ctx.instance_id, "error": repr(outcome)})
                continue
            pred, errors, was_truncated = outcome
            regenerations += len(errors) - (pred is None)
            truncated += was_truncated
            if pred is None:
                parse_failures += 1
                pairs.append(LabeledPair(ctx.target_label, INVALID, ctx.target_duration, float("nan"), False))
            else:
                pairs.append(
                    LabeledPair(ctx.target_label, pred.next_activity.name, ctx.target_duration, pred.duration_minutes)
                )
        per_shot[str(n)] = _score_next(pairs, config) | {
            "counts": {
                "eval_intervals": len(split.eval),
                "lacking_history": ev.lacking_history,
                "history_from_train": ev.history_from_train,
                "backend_failures": backend_failures,
                "parse_failures": parse_failures,
                "scored": len(pairs),
                "duration_scored": len(pairs) - parse_failures,
                "regenerations": regenerations,
                "retrieval_queries": pipe.retrieval_queries.get(n, 0),
                "truncated_demonstrations": truncated,
            }
        }

    report = RunReport(
        config=config.to_dict(),
        provenance=_provenance(config, priors, pipe.assets, pipe),
        next_activity={"per_shot": per_shot},
        failures=failures,
    )
    report.meta = _meta(pipe, started)
    return report


def _score_next(pairs: list[LabeledPair], config: ExperimentConfig) -> dict:
    if not pairs:
        return {"classification": None, "duration": None, "joint_success": None}
    try:
        duration = duration_report(pairs).to_dict()
    except RoutinecastError:
        duration = None
    return {
        "classification": classification_report(pairs).to_dict(),
        "duration": duration,
        "joint_success": {f"{t:g}": joint_success(pairs, t) for t in config.tolerances},
    }


def _meta(pipe: Pipeline, started: float) -> dict:
    backend = pipe.backend
    return {
        "wall_clock_s": time.perf_counter() - started,
        "network_calls": backend.network_calls,
        "cache_hits": getattr(backend, "hits", None),
        "cache_misses": getattr(backend, "misses", None),
        "transient_retries": getattr(backend, "transient_retries", None),
    }


# -- rollout task --------------------------------------------------------------------


@dataclass(frozen=True)
class EvalDay:
    day_index: int
    day_id: str
    seed_history: tuple[ActivityInterval, ...]
    span_start: datetime
    span_end: datetime
    truth: tuple[ActivityInterval, ...]


def eval_days(eval_intervals: Sequence[ActivityInterval], seed_count: int = 3) -> tuple[list[EvalDay], list[dict]]:
    """Calendar days of the evaluation split with their seed history and rollout span.

    The span runs from the end of the day's ``seed_count``-th activity to the
    following midnight; the truth covers every evaluation interval overlapping it.
    """
    by_date: dict = defaultdict(list)
    for iv in eval_intervals:
        by_date[iv.start.date()].append(iv)
    days, skipped = [], []
    for k, d in enumerate(sorted(by_date)):
        ivs = by_date[d]
        if len(ivs) < seed_count:
            skipped.append({"day": d.isoformat(), "reason": f"fewer than {seed_count} activities"})
            continue
        seed = tuple(ivs[:seed_count])
        start = seed[-1].end
        end = datetime.combine(d + timedelta(days=1), datetime.min.time())
        if start >= end:
            skipped.append({"day": d.isoformat(), "reason": "seed history runs past midnight"})
            continue
        truth = tuple(iv for iv in eval_intervals if iv.end > start and iv.start < end)
        days.append(EvalDay(k, d.isoformat(), seed, start, end, truth))
    return days, skipped


def _score_day(day: EvalDay, steps: Sequence[RolloutStep], gap_policy: str) -> dict:
    truth = expand_timeline(day.truth, day.span_start, day.span_end, day.day_id)
    pred = expand_timeline(steps, day.span_start, day.span_end, day.day_id)
    truth, pred = apply_gap_policy(truth, pred, gap_policy)
    res = dtw(truth, pred)
    return {"day": day.day_id, "raw": res.raw, "normalized": res.normalized, "t_day": res.t_day, "steps": len(steps)}


def llm_rollout(pipe: Pipeline, day: EvalDay, n: int) -> list[RolloutStep]:
    history: list[tuple[str, float]] = [(iv.label, iv.duration_minutes) for iv in day.seed_history]
    clock = day.span_start
    steps: list[RolloutStep] = []
    while clock < day.span_end:
        if len(steps) >= MAX_ROLLOUT_STEPS:
            raise RoutinecastError(f"rollout exceeded {MAX_ROLLOUT_STEPS} steps")
        ctx = make_context(history, clock, instance_id=f"{day.day_id}#{len(steps)}", source="eval")
        pred, errors, _ = pipe.predict(ctx, n)
        if pred is None:
            raise RoutinecastError(f"no parseable answer after {len(errors)} attempts ({', '.join(errors)})")
        steps.append(RolloutStep(pred.next_activity.name, clock, pred.duration_minutes))
        history.append((pred.next_activity.name, pred.duration_minutes))
        clock = advance(clock, pred.duration_minutes)
    return steps


def baseline_rollouts(priors: Priors, days: Sequence[EvalDay], base_seed: int, n_seeds: int, gap_policy: str) -> list[dict]:
    """Sampled Markov rollouts; seed ``base_seed + s`` with stream ``day_index`` for each day."""
    rows = []
    for day in days:
        for s in range(n_seeds):
            seed = base_seed + s
            steps = rollout_baseline(priors, day.seed_history, day.span_start, day.span_end, make_rng(seed, day.day_index))
            rows.append(_score_day(day, steps, gap_policy) | {"seed": seed})
    return rows


def summarize_dtw(rows: list[dict]) -> dict:
    return {
        "median_normalized": _median([r["normalized"] for r in rows]),
        "median_raw": _median([r["raw"] for r in rows]),
        "days_scored": len({r["day"] for r in rows}),
        "rows": len(rows),
    }


def run_rollout(
    config: ExperimentConfig,
    split: SplitDataset,
    ontology: Ontology,
    priors: Priors,
    backend: Backend,
    assets: PromptAssets | None = None,
    embedder: Embedder | None = None,
    pipeline: Pipeline | None = None,
) -> RunReport:
    started = time.perf_counter()
    pipe = pipeline or build_pipeline(config, split, ontology, priors, backend, assets, embedder)
    days, skipped = eval_days(split.eval, config.rollout_seed_activities)
    failures: list[dict] = []
    per_shot: dict[str, dict] = {}
    for n in config.shot_counts:

        def work(day: EvalDay):
            try:
                return _score_day(day, llm_rollout(pipe, day, n), config.gap_policy)
            except AuthError:
                raise
            except RoutinecastError as exc:
                return exc

        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            outcomes = list(pool.map(work, days))
        rows, day_failures = [], []
        for day, outcome in zip(days, outcomes):
            if isinstance(outcome, Exception):
                day_failures.append({"day": day.day_id, "reason": repr(outcome)})
                failures.append({"task": "rollout", "shots": n, "day": day.day_id, "error": repr(outcome)})
            else:
                rows.append(outcome)
        per_shot[str(n)] = {"days": rows, "failed_days": day_failures} | summarize_dtw(rows)

    base_rows = baseline_rollouts(priors, days, config.seed, config.baseline_seeds, config.gap_policy)
    report = RunReport(
        config=config.to_dict(),
        provenance=_provenance(config, priors, pipe.assets, pipe),
        rollout={
            "skipped_days": skipped,
            "per_shot": per_shot,
            "baseline": {"days": base_rows} | summarize_dtw(base_rows),
        },
        failures=failures,
    )
    report.meta = _meta(pipe, started)
    return report


# -- report files ------------------------------------------------------------------

TABLE_METRICS = (
    ("Accuracy", ("classification", "accuracy")),
    ("Macro-F1", ("classification", "macro_f1")),
    ("Weighted-F1", ("classification", "weighted_f1")),
    ("Macro-Precision", ("classification", "macro_precision")),
    ("Macro-Recall", ("classification", "macro_recall")),
    ("Weighted-Precision", ("classification", "weighted_precision")),
    ("Weighted-Recall", ("classification", "weighted_recall")),
    ("MAE [min]", ("duration", "mae")),
    ("RMSE [min]", ("duration", "rmse")),
)


def _dig(doc: dict | None, path: tuple[str, ...]):
    for key in path:
        if doc is None:
            return None
        doc = doc.get(key)
    return doc


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def emit_report(report: RunReport, out_dir: str | Path, formats: Sequence[str] = ("json", "csv")) -> list[Path]:
    """Write ``report.json``, ``meta.json`` and the CSV tables; return the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    tag = [report.provenance["config_hash"], report.provenance["seed"]]
    if "json" in formats:
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        (out / "meta.json").write_text(json.dumps(report.meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        written += [out / "report.json", out / "meta.json"]
    if "csv" not in formats:
        return written

    if report.next_activity:
        per_shot = report.next_activity["per_shot"]
        shots = list(per_shot)
        tolerances = list((per_shot[shots[0]].get("joint_success") or {}).keys())
        header = ["config_hash", "seed", "shots"] + [name for name, _ in TABLE_METRICS]
        header += [f"Joint Success@{t}" for t in tolerances] + ["scored", "parse_failures", "backend_failures"]
        rows = []
        for n in shots:
            entry = per_shot[n]
            row = tag + [int(n)] + [_dig(entry, path) for _, path in TABLE_METRICS]
            row += [_dig(entry, ("joint_success", t)) for t in tolerances]
            row += [entry["counts"]["scored"], entry["counts"]["parse_failures"], entry["counts"]["backend_failures"]]
            rows.append(row)
        _write_csv(out / "next_summary.csv", header, rows)

        table = [[name] + [_dig(per_shot[n], path) for n in shots] for name, path in TABLE_METRICS]
        table += [[f"Joint Success@{t}"] + [_dig(per_shot[n], ("joint_success", t)) for n in shots] for t in tolerances]
        header = ["metric"] + [f"N={n}" for n in shots] + ["config_hash", "seed"]
        _write_csv(out / "table1.csv", header, [r + tag for r in table])
        written += [out / "next_summary.csv", out / "table1.csv"]

    if report.rollout:
        roll = report.rollout
        summary = [tag + [f"N={n}", e["median_normalized"], e["median_raw"], e["days_scored"], len(e["failed_days"])]
                   for n, e in roll["per_shot"].items()]
        b = roll["baseline"]
        summary.append(tag + ["baseline", b["median_normalized"], b["median_raw"], b["days_scored"], 0])
        _write_csv(
            out / "rollout_summary.csv",
            ["config_hash", "seed", "arm", "median_dtw_normalized", "median_dtw_raw", "days_scored", "days_failed"],
            summary,
        )
        per_day = [tag + [f"N={n}", "", r["day"], r["raw"], r["normalized"], r["t_day"]]
                   for n, e in roll["per_shot"].items() for r in e["days"]]
        per_day += [tag + ["baseline", r["seed"], r["day"], r["raw"], r["normalized"], r["t_day"]] for r in b["days"]]
        _write_csv(
            out / "dtw_per_day.csv",
            ["config_hash", "seed", "arm", "rollout_seed", "day", "dtw_raw", "dtw_normalized", "t_day"],
            per_day,
        )
        written += [out / "rollout_summary.csv", out / "dtw_per_day.csv"]
    return written
