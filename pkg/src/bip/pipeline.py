"""Stage orchestration: events in, content-addressed artifacts out.

Stages: 1 ingest, 2 derive, 3 snapshot, 4 metrics, 5 detect, 6 facts,
7 feed. Every stage writes its artifacts atomically and every artifact
carries ``schema_version``; re-running over identical inputs rewrites
identical bytes.
"""

from __future__ import annotations

import hashlib
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TypeVar

from bip.bkg import FactStore, facts_from_findings
from bip.canonical import SCHEMA_VERSION, atomic_write_text, iter_jsonl, read_json, read_jsonl, write_json
from bip.config import PipelineConfig, dump_config
from bip.detectors import (
    DetectorInputs,
    Finding,
    ScoredInsight,
    rank_feed,
    run_all,
    run_detector_dag,
    score_interestingness,
)
from bip.domain import DAY, TimeWindow, parse_timestamp, resolve_window
from bip.errors import BipError, ComputationError, EmptySnapshot, MissingArtifact, StageError
from bip.gll import BundleLimits, build_fact_bundle, render_narrative, validate_grounding
from bip.gll.narrative import ExternalGenerator
from bip.graph import GraphSnapshot, build_snapshot, extract_journeys
from bip.markov import ChainMetrics, compute_metrics
from bip.nsd import (
    DerivedStateEvent,
    NormalizedEvent,
    actor_properties,
    deduplicate,
    derive_states,
    filter_bots,
    normalize_stream,
    resolve_identities,
)

T = TypeVar("T")

ARTIFACTS = (
    "normalized_events.jsonl",
    "quarantine.jsonl",
    "derived_states.jsonl",
    "actor_properties.json",
    "snapshot.json",
    "metrics.json",
    "findings.jsonl",
    "detector_errors.json",
    "facts.jsonl",
    "feed.json",
)


@dataclass
class StageReport:
    stage: int
    name: str
    seconds: float
    counts: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"stage": self.stage, "name": self.name, "seconds": round(self.seconds, 4), **self.counts}


@dataclass
class PipelineResult:
    out_dir: Path
    window: TimeWindow
    snapshot: GraphSnapshot
    metrics: ChainMetrics
    findings: list[Finding]
    store: FactStore
    feed: list[dict[str, Any]]
    reports: list[StageReport]
    snapshots: dict[str, GraphSnapshot]


def versioned(d: Mapping[str, Any]) -> dict[str, Any]:
    return {"schema_version": SCHEMA_VERSION, **d}


def _write_lines(path: Path, records: Iterable[Mapping[str, Any]]) -> int:
    from bip.canonical import canonical_json

    lines = [canonical_json(versioned(r)) + "\n" for r in records]
    atomic_write_text(path, "".join(lines))
    return len(lines)


def run_stage(reports: list[StageReport], number: int, name: str, fn: Callable[[], tuple[T, dict]]) -> T:
    t0 = time.perf_counter()
    try:
        value, counts = fn()
    except BipError as exc:
        raise StageError(number, name, exc) from exc
    reports.append(StageReport(number, name, time.perf_counter() - t0, counts))
    return value


# -- windows -----------------------------------------------------------------


def default_window_end(records: Iterable[Mapping[str, Any]]) -> int:
    """The UTC midnight following the latest parseable event timestamp (0 when there is none)."""
    latest = None
    for r in records:
        ts = r.get("timestamp")
        try:
            t = ts if isinstance(ts, int) and not isinstance(ts, bool) else parse_timestamp(ts)
        except (TypeError, ValueError):
            continue
        latest = t if latest is None else max(latest, t)
    if latest is None:
        return 0
    return (latest // DAY + 1) * DAY


def resolve_run_window(cfg: PipelineConfig, records: Sequence[Mapping[str, Any]], end: int | None,
                       days: int | None) -> TimeWindow:
    anchor = default_window_end(records) if end is None else end
    return resolve_window(anchor, (days if days is not None else cfg.window_days) * DAY)


def load_events(path: str | Path) -> list[dict[str, Any]]:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"event file {p} does not exist")
    return read_jsonl(p)


# -- stages ------------------------------------------------------------------


def ingest(cfg: PipelineConfig, records: Sequence[Mapping[str, Any]], window: TimeWindow, out: Path):
    accepted, quarantined = normalize_stream(records, cfg.ingest.lag_tolerance, window.end)
    unique = deduplicate(accepted, cfg.ingest.dedup_window)
    kept, bots = filter_bots(unique, cfg.bots)
    _, normalized, identity = resolve_identities(kept, cfg.ingest.alias_events, now=window.end)
    _write_lines(out / "normalized_events.jsonl", (e.to_dict() for e in normalized))
    _write_lines(out / "quarantine.jsonl", (q.to_dict() for q in quarantined + bots))
    counts = {
        "records": len(records), "accepted": len(accepted), "quarantined": len(quarantined),
        "duplicates": len(accepted) - len(unique), "bot_events": len(bots), "normalized": len(normalized),
        "identity": identity.to_dict(),
    }
    return normalized, counts


def derive(cfg: PipelineConfig, events: Sequence[NormalizedEvent], window: TimeWindow, out: Path):
    derived = derive_states(events, cfg.states, cfg.lifecycle, as_of=window.end)
    props = actor_properties(events)
    _write_lines(out / "derived_states.jsonl", (d.to_dict() for d in derived))
    write_json(out / "actor_properties.json", versioned({"actors": dict(sorted(props.items()))}))
    return (derived, props), {"derived_states": len(derived), "actors": len(props)}


def _snapshot_for(cfg, derived, window, segment=None, props=None) -> GraphSnapshot:
    journeys = extract_journeys(derived, cfg.journey, window)
    return build_snapshot(journeys, cfg.journey, window, segment, props, cfg.top_paths,
                          cfg.detectors.target_outcome)


@dataclass
class SnapshotSet:
    current: GraphSnapshot
    previous: GraphSnapshot | None
    history: list[GraphSnapshot]
    segments: list[GraphSnapshot]

    def all(self) -> dict[str, GraphSnapshot]:
        snaps = [self.current, *self.history, *self.segments]
        return {s.snapshot_id: s for s in snaps}


def snapshot(cfg: PipelineConfig, derived: Sequence[DerivedStateEvent], props, window: TimeWindow, out: Path):
    current = _snapshot_for(cfg, derived, window)
    history: list[GraphSnapshot] = []
    w = window
    for _ in range(max(1, cfg.novelty_lookback)):
        w = w.previous()
        try:
            history.append(_snapshot_for(cfg, derived, w))
        except EmptySnapshot:
            break
    segments = []
    for seg in cfg.segments:
        try:
            segments.append(_snapshot_for(cfg, derived, window, seg, props))
        except EmptySnapshot:
            continue
    snaps = SnapshotSet(current, history[0] if history else None, history[: cfg.novelty_lookback], segments)
    write_json(out / "snapshot.json", current.to_dict())
    (out / "snapshots").mkdir(exist_ok=True)
    for sid, s in sorted(snaps.all().items()):
        write_json(out / "snapshots" / f"{sid}.json", s.to_dict())
    counts = {"snapshot_id": current.snapshot_id, "journeys": current.n_journeys,
              "previous": snaps.previous.snapshot_id if snaps.previous else None,
              "segments": [s.segment_id for s in segments]}
    return snaps, counts


def metrics(snap: GraphSnapshot, out: Path):
    m = compute_metrics(snap)
    write_json(out / "metrics.json", versioned(m.to_dict()))
    return m, {"states": len(m.chain.transient_states)}


def _history(cfg: PipelineConfig, snaps: SnapshotSet) -> list[list[Finding]]:
    out = []
    for s in snaps.history:
        try:
            out.append(run_all(s, compute_metrics(s), cfg.detectors, cfg.confidence))
        except ComputationError:
            out.append([])
    return out


def detect(cfg: PipelineConfig, snaps: SnapshotSet, out: Path, workers: int = 1):
    inputs = DetectorInputs(snaps.current, snaps.previous, tuple(snaps.segments), cfg.release_pairs)
    result = run_detector_dag(inputs, cfg.detectors, cfg.weights, coeffs=cfg.confidence,
                              history=_history(cfg, snaps), actionability=cfg.actionability, workers=workers)
    _write_lines(out / "findings.jsonl", (f.to_dict() for f in result.findings))
    write_json(out / "detector_errors.json", versioned({"errors": dict(sorted(result.errors.items()))}))
    counts = {"findings": len(result.findings), "errors": dict(sorted(result.errors.items()))}
    return result, counts


def facts(cfg: PipelineConfig, findings: Sequence[Finding], snapshots: Mapping[str, GraphSnapshot], out: Path):
    path = out / "facts.jsonl"
    store = FactStore.load(path)
    before = len(store)
    for fact in facts_from_findings(findings, snapshots, cfg.detectors, cfg.confidence,
                                    cfg.facts.support_min_probability):
        store.assert_fact(fact)
    store.flush(path)
    return store, {"facts": len(store), "new_facts": len(store) - before}


def feed(
    cfg: PipelineConfig,
    scored: Sequence[ScoredInsight],
    store: FactStore,
    window: TimeWindow,
    snapshot_id: str,
    errors: Mapping[str, str],
    out: Path,
    generator: ExternalGenerator | None = None,
):
    limits = BundleLimits(cfg.facts.max_facts, cfg.facts.min_confidence)
    entries = []
    narrated = 0
    for item in scored:
        entry = item.to_dict()
        bundle = build_fact_bundle(item.finding, store, limits)
        report = validate_grounding(bundle, cfg.detectors.n_min)
        entry["bundle"] = bundle.to_dict()
        entry["grounding"] = report.to_dict()
        if report.overall:
            entry["content"] = render_narrative(bundle, report, generator).to_dict()
            narrated += 1
        else:
            entry["content"] = None
        entries.append(entry)
    doc = versioned({
        "snapshot_id": snapshot_id,
        "window": window.to_dict(),
        "insights": entries,
        "detector_errors": dict(sorted(errors.items())),
    })
    write_json(out / "feed.json", doc)
    return entries, {"insights": len(entries), "narrated": narrated}


# -- whole run ---------------------------------------------------------------


def run_pipeline(
    cfg: PipelineConfig,
    records: Sequence[Mapping[str, Any]],
    out_dir: str | Path,
    window: TimeWindow | None = None,
    workers: int = 1,
    generator: ExternalGenerator | None = None,
) -> PipelineResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    window = window or resolve_run_window(cfg, records, None, None)
    atomic_write_text(out / "config.resolved.yaml", dump_config(cfg))
    write_json(out / "run.json", versioned({"window": window.to_dict()}))
    reports: list[StageReport] = []

    events = run_stage(reports, 1, "ingest", lambda: ingest(cfg, records, window, out))
    derived, props = run_stage(reports, 2, "derive", lambda: derive(cfg, events, window, out))
    snaps = run_stage(reports, 3, "snapshot", lambda: snapshot(cfg, derived, props, window, out))
    m = run_stage(reports, 4, "metrics", lambda: metrics(snaps.current, out))
    dag = run_stage(reports, 5, "detect", lambda: detect(cfg, snaps, out, workers))
    all_snaps = snaps.all()
    store = run_stage(reports, 6, "facts", lambda: facts(cfg, dag.findings, all_snaps, out))
    entries = run_stage(reports, 7, "feed", lambda: feed(cfg, dag.feed, store, window, snaps.current.snapshot_id,
                                                       dag.errors, out, generator))
    write_manifest(out)
    return PipelineResult(out, window, snaps.current, m, dag.findings, store, entries, reports, all_snaps)


def write_manifest(out: Path) -> dict[str, str]:
    """sha256 of every top-level artifact present."""
    digests = {}
    for name in ARTIFACTS:
        p = out / name
        if p.exists():
            digests[name] = hashlib.sha256(p.read_bytes()).hexdigest()
    write_json(out / "manifest.json", versioned({"artifacts": digests}))
    return digests


# -- loaders for stage-by-stage CLI use ----------------------------------------


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing artifact {path}; run the earlier stage first")
    return path


def load_window(out: Path) -> TimeWindow:
    return TimeWindow.from_dict(read_json(_require(out / "run.json"))["window"])


def load_normalized(out: Path) -> list[NormalizedEvent]:
    rows = []
    for d in iter_jsonl(_require(out / "normalized_events.jsonl")):
        rows.append(NormalizedEvent(d["event_id"], d["actor_id"], d["event_name"], parse_timestamp(d["timestamp"]),
                                    d["properties"], d["context"], d["canonical_actor_id"], d["ingestion_lag_ms"]))
    return rows


def load_derived(out: Path) -> tuple[list[DerivedStateEvent], dict[str, dict[str, Any]]]:
    derived = [DerivedStateEvent.from_dict(d) for d in iter_jsonl(_require(out / "derived_states.jsonl"))]
    props = read_json(_require(out / "actor_properties.json"))["actors"]
    return derived, props


def load_snapshots(out: Path) -> dict[str, GraphSnapshot]:
    d = _require(out / "snapshots")
    return {s.snapshot_id: s for s in (GraphSnapshot.from_dict(read_json(p)) for p in sorted(d.glob("*.json")))}


def load_current_snapshot(out: Path) -> GraphSnapshot:
    return GraphSnapshot.from_dict(read_json(_require(out / "snapshot.json")))


def load_findings(out: Path) -> list[Finding]:
    return [Finding.from_dict(d) for d in iter_jsonl(_require(out / "findings.jsonl"))]


def snapshot_set_from_disk(cfg: PipelineConfig, out: Path) -> SnapshotSet:
    """Rebuild the current / previous / segment grouping from stored snapshots."""
    current = load_current_snapshot(out)
    snaps = load_snapshots(out)
    history = sorted(
        (s for s in snaps.values()
         if s.segment_id == current.segment_id and s.journey_id == current.journey_id
         and s.window.end <= current.window.start),
        key=lambda s: -s.window.end,
    )
    segments = [s for s in snaps.values() if s.window == current.window and s.segment_id != current.segment_id]
    order = {seg.segment_id: i for i, seg in enumerate(cfg.segments)}
    segments.sort(key=lambda s: order.get(s.segment_id, len(order)))
    previous = history[0] if history and history[0].window.end == current.window.start else None
    return SnapshotSet(current, previous, history[: cfg.novelty_lookback], segments)


def load_detector_errors(out: Path) -> dict[str, str]:
    p = out / "detector_errors.json"
    return read_json(p)["errors"] if p.exists() else {}


def score_findings(cfg: PipelineConfig, findings: Sequence[Finding], snaps: SnapshotSet) -> list[ScoredInsight]:
    """The ranked feed for stored findings, with novelty from the stored history windows."""
    history = _history(cfg, snaps)
    return rank_feed([score_interestingness(f, cfg.weights, cfg.detectors, history, cfg.actionability)
                      for f in findings])
