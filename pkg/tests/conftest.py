from __future__ import annotations

import os
from datetime import datetime, timedelta
from pathlib import Path

import pytest

from routinecast.ingest import ActivityInterval, Ontology, SkipReport, build_intervals, chronological_split, parse_events
from routinecast.priors import estimate_priors
from routinecast.synthetic import generate_log

ARUBA_ENV = "ROUTINECAST_ARUBA_DATA"
ARUBA_CANDIDATES = (
    Path(__file__).resolve().parents[1] / "data" / "aruba" / "data",
    Path("/root/data/aruba/data"),
)


def aruba_path() -> Path | None:
    """Location of the public Aruba log, if present on this machine."""
    env = os.environ.get(ARUBA_ENV)
    if env:
        return Path(env) if Path(env).is_file() else None
    return next((p for p in ARUBA_CANDIDATES if p.is_file()), None)


def iv(label: str, start: str, minutes: float) -> ActivityInterval:
    t0 = datetime.fromisoformat(start)
    return ActivityInterval(label, t0, t0 + timedelta(minutes=minutes))


def chain(labels_minutes, start="2024-01-01 00:00", gap=0.0) -> list[ActivityInterval]:
    """Back-to-back intervals from (label, minutes) pairs, optionally separated by ``gap`` minutes."""
    out, clock = [], datetime.fromisoformat(start)
    for label, minutes in labels_minutes:
        out.append(ActivityInterval(label, clock, clock + timedelta(minutes=minutes)))
        clock += timedelta(minutes=minutes + gap)
    return out


@pytest.fixture(scope="session")
def synthetic_lines() -> list[str]:
    return generate_log(days=219, seed=1)


@pytest.fixture(scope="session")
def synthetic_log(tmp_path_factory, synthetic_lines) -> Path:
    path = tmp_path_factory.mktemp("synth") / "data"
    path.write_text("\n".join(synthetic_lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def synthetic_intervals(synthetic_lines):
    report = SkipReport()
    return build_intervals(parse_events(synthetic_lines, report), report), report


@pytest.fixture(scope="session")
def synthetic_ontology(synthetic_intervals) -> Ontology:
    return Ontology.from_intervals(synthetic_intervals[0])


@pytest.fixture(scope="session")
def synthetic_split(synthetic_intervals):
    return chronological_split(synthetic_intervals[0], 0.8)


@pytest.fixture(scope="session")
def synthetic_priors(synthetic_split, synthetic_ontology):
    return estimate_priors(synthetic_split.train, synthetic_ontology)


@pytest.fixture(scope="session")
def small_split():
    """About two weeks of synthetic data for quick end-to-end runs."""
    lines = generate_log(days=14, seed=7)
    report = SkipReport()
    ivs = build_intervals(parse_events(lines, report), report)
    ontology = Ontology.from_intervals(ivs)
    split = chronological_split(ivs, 0.8)
    return split, ontology, estimate_priors(split.train, ontology)


ACCEPTANCE_RESULTS: list[tuple[str, str, str]] = []


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL verdict for the acceptance criterion exercised by this test."""
    name = request.node.get_closest_marker("acceptance").kwargs["name"]
    detail: list[str] = []
    yield detail
    rep = getattr(request.node, "rep_call", None)
    passed = rep is not None and rep.passed
    if rep is not None and rep.failed:
        detail.append(rep.longrepr.reprcrash.message.splitlines()[0])
    note = "; ".join(detail)
    ACCEPTANCE_RESULTS.append(("PASS" if passed else "FAIL", name, note))
    print(f"{'PASS' if passed else 'FAIL'} {name}: {note}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for verdict, name, note in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{verdict} {name}: {note}")
