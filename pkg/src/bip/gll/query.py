"""Pull-based question answering over fact summaries with idf-weighted token overlap."""

from __future__ import annotations

import math
import re
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Any

from bip.bkg import BehavioralFact, FactStore
from bip.domain import TimeWindow, parse_timestamp
from bip.errors import NoRelevantFacts
from bip.gll.bundle import BundleLimits, FactBundle, assemble_bundle
from bip.gll.grounding import GroundingReport, validate_grounding
from bip.gll.narrative import Narrative, render_narrative
from bip.vocab import is_hub

STOPWORDS = frozenset({
    "a", "an", "and", "are", "as", "at", "be", "by", "do", "does", "for", "from", "how", "in", "is", "it",
    "of", "on", "or", "the", "their", "this", "to", "was", "what", "when", "where", "which", "who", "why",
    "with", "most", "our", "we", "users", "user",
})

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_DATE_RE = re.compile(r"\b(\d{4}-\d{2}-\d{2})\b")


def tokenize(text: str) -> list[str]:
    """Lowercased alphanumeric runs; underscores and punctuation separate tokens."""
    return [t for t in _TOKEN_RE.findall(text.lower()) if t not in STOPWORDS]


@dataclass(frozen=True)
class JourneySnapshotRef:
    snapshot_id: str
    journey_id: str
    window: TimeWindow


@dataclass(frozen=True)
class QueryAnswer:
    question: str
    journey_id: str
    window: TimeWindow
    ranked: tuple[tuple[str, float], ...]
    bundle: FactBundle
    grounding: GroundingReport
    narrative: Narrative | None

    def to_dict(self) -> dict[str, Any]:
        return {
            "question": self.question,
            "journey_id": self.journey_id,
            "window": self.window.to_dict(),
            "ranked_facts": [{"fact_id": f, "score": s} for f, s in self.ranked],
            "bundle": self.bundle.to_dict(),
            "grounding": self.grounding.to_dict(),
            "answer": self.narrative.to_dict() if self.narrative else None,
        }


def resolve_scope(question: str, index: Sequence[JourneySnapshotRef]) -> tuple[str, TimeWindow, set[str]]:
    """Journey and window named in the question, else the most recent snapshot's."""
    if not index:
        raise NoRelevantFacts("no snapshots are indexed")
    q = question.lower()
    journeys = sorted({r.journey_id for r in index})
    named = [j for j in journeys if j.lower() in q]
    candidates = [r for r in index if r.journey_id in named] if named else list(index)
    if named and not candidates:
        raise NoRelevantFacts(f"journey {named[0]!r} has no snapshots")
    dates = [parse_timestamp(d + "T00:00:00Z") for d in _DATE_RE.findall(question)]
    if dates:
        dated = [r for r in candidates if any(r.window.contains(t) for t in dates)]
        if dated:
            candidates = dated
    latest = max(candidates, key=lambda r: (r.window.end, r.snapshot_id))
    chosen = [r for r in candidates if r.journey_id == latest.journey_id and r.window == latest.window]
    return latest.journey_id, latest.window, {r.snapshot_id for r in chosen}


def score_facts(question: str, facts: Sequence[BehavioralFact]) -> list[tuple[BehavioralFact, float]]:
    """Sum of idf over question tokens present in each fact summary, best first."""
    docs = [set(tokenize(f.summary)) for f in facts]
    df = Counter(t for d in docs for t in d)
    n = len(facts)
    q = set(tokenize(question))
    scored = []
    for f, d in zip(facts, docs):
        s = math.fsum(math.log(1 + n / df[t]) for t in q & d)
        if s > 0:
            scored.append((f, s))
    scored.sort(key=lambda t: (-t[1], -t[0].confidence[0], -_strength(t[0]), t[0].fact_id))
    return scored


def _strength(fact: BehavioralFact) -> float:
    # equal matches prefer the structurally strongest fact
    ev = fact.evidence
    return abs(float(ev.get("removal_effect", ev.get("effect", 0.0))))


def answer_query(
    question: str,
    store: FactStore,
    index: Sequence[JourneySnapshotRef],
    n_min: int,
    limits: BundleLimits = BundleLimits(),
    top_k: int = 3,
    min_score: float = 0.0,
) -> QueryAnswer:
    journey_id, window, snap_ids = resolve_scope(question, index)
    pool = [f for f in store if f.provenance["snapshot_id"] in snap_ids]
    if not pool:
        raise NoRelevantFacts(f"no facts for journey {journey_id!r} in the selected window")
    scored = score_facts(question, pool)
    if not scored or scored[0][1] <= min_score:
        raise NoRelevantFacts("no fact summary matches the question")
    top = [f for f, _ in scored[:top_k]]
    seeds = {e for f in top for e in f.related_entity_ids if not is_hub(e)} or {top[0].subject}
    hood = [f for f in store.one_hop(seeds, limits.max_facts + len(top), window, limits.min_confidence)
            if f.provenance["snapshot_id"] in snap_ids]
    ordered = top[1:] + [f for f in hood if f not in top]
    bundle = assemble_bundle(top[0].provenance["finding_id"], top[0], ordered, limits)
    report = validate_grounding(bundle, n_min)
    narrative = render_narrative(bundle, report) if report.overall else None
    ranked = tuple((f.fact_id, s) for f, s in scored[:top_k])
    return QueryAnswer(question, journey_id, window, ranked, bundle, report, narrative)


def snapshot_index(snapshots: Mapping[str, Any]) -> list[JourneySnapshotRef]:
    """Index entries from loaded snapshots (objects with snapshot_id, journey_id and window)."""
    return [JourneySnapshotRef(s.snapshot_id, s.journey_id, s.window) for s in snapshots.values()]
