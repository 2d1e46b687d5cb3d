"""Command-line entry point: ``routinecast ingest|priors|baseline|run|synth``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .backend import DEFAULT_MODEL, Backend, HttpChatBackend, MockBackend, cached
from .baseline import make_rng, rollout_baseline
from .errors import ConfigError, RoutinecastError
from .evalmetrics import GAP_POLICIES
from .ingest import Ontology, SplitDataset, load_aruba, read_intervals, read_ontology_from_records, write_intervals
from .priors import Priors, estimate_priors, load_priors, save_priors
from .promptkit import MAX_REGENERATIONS, TextBlock
from .retrieval import DEFAULT_EMBED_MODEL, BuiltinEmbedder, HttpEmbedder
from .runner import (
    DEFAULT_SHOTS,
    DEFAULT_TOLERANCES,
    ExperimentConfig,
    PromptAssets,
    _score_day,
    eval_days,
    emit_report,
    run_next_activity,
    run_rollout,
    summarize_dtw,
)

log = logging.getLogger("routinecast")

TRAIN_FILE, EVAL_FILE, ONTOLOGY_FILE, SKIP_FILE = "train.jsonl", "eval.jsonl", "ontology.json", "skip_report.json"


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ontology_near(path: Path) -> Ontology:
    """Ontology saved next to an interval file by ``ingest``, else the labels found in the file."""
    sidecar = path.parent / ONTOLOGY_FILE
    if sidecar.exists():
        return Ontology(json.loads(sidecar.read_text(encoding="utf-8")))
    return read_ontology_from_records(path)


def cmd_ingest(args) -> int:
    split, ontology, report = load_aruba(args.input, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_intervals(out / TRAIN_FILE, split.train, ontology)
    write_intervals(out / EVAL_FILE, split.eval, ontology)
    (out / ONTOLOGY_FILE).write_text(json.dumps(list(ontology.names)) + "\n", encoding="utf-8")
    (out / SKIP_FILE).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{len(split.train)} train / {len(split.eval)} eval intervals, {len(ontology)} labels -> {out}")
    return 0


def cmd_priors(args) -> int:
    train_path = Path(args.train)
    ontology = Ontology(json.loads(Path(args.ontology).read_text())) if args.ontology else _ontology_near(train_path)
    priors = estimate_priors(read_intervals(train_path), ontology)
    save_priors(priors, args.out)
    print(f"priors over {len(ontology)} labels -> {args.out}")
    return 0


def cmd_baseline(args) -> int:
    priors = load_priors(args.priors)
    eval_ivs = read_intervals(args.eval)
    days, skipped = eval_days(eval_ivs, args.seed_activities)
    rows = []
    with open(args.out, "w", encoding="utf-8") as fh:
        for day in days:
            for s in range(args.seeds):
                seed = args.seed + s
                steps = rollout_baseline(priors, day.seed_history, day.span_start, day.span_end, make_rng(seed, day.day_index))
                score = _score_day(day, steps, args.gap) | {"seed": seed}
                rows.append(score)
                record = score | {
                    "steps": [
                        {"label": st.label, "start_iso8601": st.start.isoformat(), "duration_minutes": st.duration_minutes}
                        for st in steps
                    ]
                }
                fh.write(json.dumps(record) + "\n")
    summary = summarize_dtw(rows)
    print(json.dumps(summary | {"skipped_days": len(skipped), "seeds": args.seeds}, sort_keys=True))
    return 0


def _load_data(args) -> tuple[SplitDataset, Ontology]:
    data = Path(args.data)
    if data.is_dir():
        train, evals = data / TRAIN_FILE, data / EVAL_FILE
        if not train.exists() or not evals.exists():
            raise ConfigError(f"{data} lacks {TRAIN_FILE}/{EVAL_FILE}; run 'routinecast ingest' first")
        tr, ev = read_intervals(train), read_intervals(evals)
        return SplitDataset(tuple(tr), tuple(ev), len(tr) / (len(tr) + len(ev))), _ontology_near(train)
    split, ontology, _ = load_aruba(data, args.split)
    return split, ontology


def _make_backend(args, priors: Priors) -> Backend:
    if args.backend == "mock":
        inner: Backend = MockBackend(priors)
    else:
        inner = HttpChatBackend(model=args.model, concurrency=args.concurrency)
    return cached(inner, args.cache_dir) if args.cache_dir else inner


def cmd_run(args) -> int:
    split, ontology = _load_data(args)
    if args.priors:
        priors = load_priors(args.priors)
        if priors.ontology != ontology:
            raise ConfigError("priors were estimated over a different ontology than the data")
    else:
        priors = estimate_priors(split.train, ontology)
    config = ExperimentConfig(
        task=args.task,
        shot_counts=args.shots,
        backend=args.backend,
        model=args.model,
        temperature=args.temperature,
        seed=args.seed,
        mmr_lambda=args.mmr_lambda,
        tolerances=args.tolerances,
        baseline_seeds=args.baseline_seeds,
        gap_policy=args.gap,
        embed_backend=args.embed_backend,
        max_regenerations=args.max_regenerations,
        concurrency=args.concurrency,
    )
    assets = PromptAssets(
        persona=TextBlock.from_file(args.persona, "persona") if args.persona else PromptAssets().persona,
        spatial=TextBlock.from_file(args.spatial, "spatial") if args.spatial else PromptAssets().spatial,
        template=TextBlock.from_file(args.template, "template") if args.template else PromptAssets().template,
    )
    embedder = HttpEmbedder(args.embed_model) if args.embed_backend == "http" else BuiltinEmbedder(ontology)
    backend = _make_backend(args, priors)
    run = run_next_activity if args.task == "next" else run_rollout
    report = run(config, split, ontology, priors, backend, assets, embedder)
    for path in emit_report(report, args.out):
        print(path)
    if report.failures:
        log.warning("%d instances or days failed; see 'failures' in report.json", len(report.failures))
    return 0


def cmd_synth(args) -> int:
    from .synthetic import write_log

    path = write_log(args.out, days=args.days, seed=args.seed, faults=not args.no_faults)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="routinecast", description="Smart-home routine forecasting experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="parse a raw CASAS log into train/eval interval files")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", type=float, default=0.8)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("priors", help="estimate transition and duration priors from training intervals")
    s.add_argument("--train", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ontology", help="JSON list of label names (default: ontology.json next to --train)")
    s.set_defaults(func=cmd_priors)

    s = sub.add_parser("baseline", help="sampled Markov rollouts over evaluation days")
    s.add_argument("--priors", required=True)
    s.add_argument("--eval", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--seeds", type=int, default=20, help="rollouts per day, seeds seed..seed+n-1")
    s.add_argument("--seed-activities", type=int, default=3)
    s.add_argument("--gap", choices=GAP_POLICIES, default="keep")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("run", help="few-shot next-activity or rollout experiment")
    s.add_argument("--task", choices=("next", "rollout"), default="next")
    s.add_argument("--shots", type=_int_list, default=DEFAULT_SHOTS)
    s.add_argument("--backend", choices=("mock", "http"), default="mock")
    s.add_argument("--model", default=DEFAULT_MODEL)
    s.add_argument("--temperature", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--priors")
    s.add_argument("--data", required=True, help="directory written by 'ingest', or a raw log file")
    s.add_argument("--split", type=float, default=0.8, help="split fraction when --data is a raw log")
    s.add_argument("--out", required=True)
    s.add_argument("--mmr-lambda", type=float, default=0.5)
    s.add_argument("--gap", choices=GAP_POLICIES, default="keep")
    s.add_argument("--tolerances", type=_float_list, default=DEFAULT_TOLERANCES)
    s.add_argument("--baseline-seeds", type=int, default=20)
    s.add_argument("--max-regenerations", type=int, default=MAX_REGENERATIONS)
    s.add_argument("--embed-backend", choices=("builtin", "http"), default="builtin")
    s.add_argument("--embed-model", default=DEFAULT_EMBED_MODEL)
    s.add_argument("--cache-dir", default=os.environ.get("ROUTINECAST_CACHE_DIR"))
    s.add_argument("--concurrency", type=int, default=4)
    s.add_argument("--persona")
    s.add_argument("--spatial")
    s.add_argument("--template")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("synth", help="write a synthetic log in the CASAS line format")
    s.add_argument("--out", required=True)
    s.add_argument("--days", type=int, default=219)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-faults", action="store_true")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (RoutinecastError, ValueError, KeyError, OSError) as exc:
        print(f"routinecast {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
