"""Behavioral knowledge graph: an append-only log of typed, evidenced facts.

Facts are never mutated. The log lives in memory with entity and
predicate indexes; ``flush`` rewrites the JSONL file atomically, so a
reader always sees a complete prefix of the log.
"""

from __future__ import annotations

import math
import threading
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from bip.canonical import SCHEMA_VERSION, atomic_write_text, canonical_json, content_hash, iter_jsonl
from bip.detectors.evidence import confidence_for, exit_support_evidence, transition_evidence
from bip.detectors.findings import Finding
from bip.domain import ConfidenceCoefficients, DetectorConfig, TimeWindow
from bip.errors import MissingProvenance, UnknownPredicate
from bip.graph import GraphSnapshot, split_edge
from bip.vocab import (
    BASE_PREDICATES,
    CAUSAL_PREDICATES,
    EXTENSION_PREDICATES,
    is_hub,
    outcome_ref,
    split_ref,
    state_ref,
)

PROVENANCE_KEYS = ("snapshot_id", "detector", "detector_version", "finding_id")

_SUMMARY_TEMPLATES = {
    "transitions_to": "{s} transitions to {o}",
    "increases_probability_of": "{s} increases probability of {o}",
    "is_activation_driver_for": "{s} is an activation driver for {o} conversion",
    "is_dropoff_point_for": "{s} is a drop-off point for {o}",
    "diverges_from": "segment {s} diverges from segment {o}",
    "regressed_after": "{s} transition regressed after release {o}",
    "changed_after": "{s} transition changed after {o}",
    "associated_with": "{s} is associated with {o}",
    "more_common_in": "{s} is more common in segment {o}",
    "less_common_in": "{s} is less common in segment {o}",
    "necessary_for_conversion": "{s} is necessary for conversion to {o}",
    "is_fast_path_to": "{s} is a fast path to {o}",
    "exhibits_loop": "{s} exhibits a repeated visit loop with {o}",
    "is_optimization_target": "{s} is a path optimization target for {o}",
}


class PredicateVocabulary:
    """Closed predicate set; extensions must be registered explicitly and may never be causal."""

    def __init__(self, extensions: Iterable[str] = EXTENSION_PREDICATES):
        self._predicates = set(BASE_PREDICATES)
        for p in extensions:
            self.register(p)

    def register(self, predicate: str) -> None:
        if predicate in CAUSAL_PREDICATES:
            raise UnknownPredicate(f"causal predicate {predicate!r} cannot be registered")
        self._predicates.add(predicate)

    def __contains__(self, predicate: object) -> bool:
        return predicate in self._predicates

    @property
    def predicates(self) -> frozenset[str]:
        return frozenset(self._predicates)


def _display(entity: str) -> str:
    kind, ident = split_ref(entity)
    if kind == "path":
        states, _, outcome = ident.partition("|")
        return " then ".join(states.split(">")) + f" ending {outcome}"
    return ident or entity


def summarize(subject: str, predicate: str, obj: str) -> str:
    template = _SUMMARY_TEMPLATES.get(predicate, "{s} " + predicate.replace("_", " ") + " {o}")
    return template.format(s=_display(subject), o=_display(obj))


@dataclass(frozen=True)
class BehavioralFact:
    fact_id: str
    subject: str
    predicate: str
    object: str
    confidence: tuple[float, str]
    validity_window: TimeWindow
    evidence: Mapping[str, Any]
    provenance: Mapping[str, str]
    summary: str
    related_entity_ids: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "fact_id": self.fact_id,
            "subject": self.subject,
            "predicate": self.predicate,
            "object": self.object,
            "confidence": {"score": self.confidence[0], "label": self.confidence[1]},
            "validity_window": self.validity_window.to_dict(),
            "evidence": dict(self.evidence),
            "provenance": dict(self.provenance),
            "summary": self.summary,
            "related_entity_ids": list(self.related_entity_ids),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> BehavioralFact:
        return cls(d["fact_id"], d["subject"], d["predicate"], d["object"],
                   (d["confidence"]["score"], d["confidence"]["label"]),
                   TimeWindow.from_dict(d["validity_window"]), dict(d["evidence"]), dict(d["provenance"]),
                   d["summary"], tuple(d["related_entity_ids"]))


def _fact_id(subject, predicate, obj, window: TimeWindow, evidence, snapshot_id: str) -> str:
    # the producing finding is lineage, not identity: the same structural
    # fact reached from two findings is one fact
    return content_hash([subject, predicate, obj, window.to_dict(), dict(evidence), snapshot_id], prefix="fact-")


def make_fact(
    subject: str,
    predicate: str,
    obj: str,
    confidence: tuple[float, str],
    window: TimeWindow,
    evidence: Mapping[str, Any],
    provenance: Mapping[str, str],
    related: Sequence[str] = (),
) -> BehavioralFact:
    related_ids = tuple(dict.fromkeys([subject, *related, obj]))
    fid = _fact_id(subject, predicate, obj, window, evidence, provenance.get("snapshot_id", ""))
    return BehavioralFact(fid, subject, predicate, obj, confidence, window, dict(evidence), dict(provenance),
                          summarize(subject, predicate, obj), related_ids)


class FactStore:
    """Single-writer, multi-reader fact log with entity and predicate indexes."""

    def __init__(self, vocabulary: PredicateVocabulary | None = None):
        self.vocabulary = vocabulary or PredicateVocabulary()
        self._facts: list[BehavioralFact] = []
        self._by_id: dict[str, BehavioralFact] = {}
        self._by_entity: dict[str, list[int]] = defaultdict(list)
        self._by_predicate: dict[str, list[int]] = defaultdict(list)
        self._by_finding: dict[str, list[int]] = defaultdict(list)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._facts)

    def __iter__(self):
        return iter(list(self._facts))

    def get(self, fact_id: str) -> BehavioralFact | None:
        return self._by_id.get(fact_id)

    def assert_fact(self, fact: BehavioralFact) -> str:
        if fact.predicate not in self.vocabulary:
            raise UnknownPredicate(f"predicate {fact.predicate!r} is not in the vocabulary")
        missing = [k for k in PROVENANCE_KEYS if not fact.provenance.get(k)]
        if missing:
            raise MissingProvenance(f"fact provenance lacks {', '.join(missing)}")
        for key, value in fact.evidence.items():
            if isinstance(value, float) and not math.isfinite(value):
                raise ValueError(f"evidence {key} is not finite")
        with self._lock:
            if fact.fact_id in self._by_id:
                return fact.fact_id
            i = len(self._facts)
            self._facts.append(fact)
            self._by_id[fact.fact_id] = fact
            for e in fact.related_entity_ids:
                self._by_entity[e].append(i)
            self._by_predicate[fact.predicate].append(i)
            self._by_finding[fact.provenance["finding_id"]].append(i)
        return fact.fact_id

    def snapshot(self, length: int | None = None) -> list[BehavioralFact]:
        """Historical read: the first *length* facts of the log."""
        return list(self._facts[: len(self._facts) if length is None else length])

    def primary_for(self, finding: Finding) -> BehavioralFact | None:
        for i in self._by_finding.get(finding.finding_id, ()):
            f = self._facts[i]
            if (f.subject, f.predicate, f.object) == (finding.subject, finding.predicate, finding.object):
                return f
        return None

    def query_facts(
        self,
        entity_ids: Iterable[str] | None = None,
        window: TimeWindow | None = None,
        min_confidence: float = 0.0,
        predicates: Iterable[str] | None = None,
    ) -> list[BehavioralFact]:
        """Facts touching any entity, valid within *window*, at or above *min_confidence*."""
        if entity_ids is None:
            idx = set(range(len(self._facts)))
        else:
            idx = set()
            for e in entity_ids:
                idx.update(self._by_entity.get(e, ()))
        preds = set(predicates) if predicates is not None else None
        out = []
        for i in idx:
            f = self._facts[i]
            if preds is not None and f.predicate not in preds:
                continue
            if window is not None and not _within(f.validity_window, window):
                continue
            if f.confidence[0] < min_confidence:
                continue
            out.append(f)
        return _ordered(out)

    def one_hop(
        self,
        seeds: Iterable[str],
        max_facts: int,
        window: TimeWindow | None = None,
        min_confidence: float = 0.0,
    ) -> list[BehavioralFact]:
        """Facts touching the seeds, then facts touching entities those facts introduce.

        Within each hop the order is confidence descending, then fact id.
        """
        if max_facts < 1:
            raise ValueError("max_facts must be >= 1")
        seeds = set(seeds)
        first = self.query_facts(seeds, window, min_confidence)
        # facts about a seed itself outrank facts that merely mention one
        first.sort(key=lambda f: f.subject not in seeds)
        introduced = {e for f in first for e in f.related_entity_ids if e not in seeds and not is_hub(e)}
        seen = {f.fact_id for f in first}
        second = [f for f in self.query_facts(introduced, window, min_confidence) if f.fact_id not in seen]
        return (first + second)[:max_facts]

    def flush(self, path: str | Path) -> None:
        text = "".join(canonical_json(f.to_dict()) + "\n" for f in self._facts)
        atomic_write_text(path, text)

    @classmethod
    def load(cls, path: str | Path, vocabulary: PredicateVocabulary | None = None) -> FactStore:
        store = cls(vocabulary)
        if Path(path).exists():
            for d in iter_jsonl(path):
                store.assert_fact(BehavioralFact.from_dict(d))
        return store


def _within(inner: TimeWindow, outer: TimeWindow) -> bool:
    return outer.start <= inner.start and inner.end <= outer.end


def _ordered(facts: Iterable[BehavioralFact]) -> list[BehavioralFact]:
    return sorted(facts, key=lambda f: (-f.confidence[0], f.fact_id))


# -- facts from findings ---------------------------------------------------


def _provenance(finding: Finding) -> dict[str, str]:
    return {
        "snapshot_id": finding.snapshot_ids[0],
        "detector": finding.detector.value,
        "detector_version": finding.detector_version,
        "finding_id": finding.finding_id,
    }


def primary_fact(finding: Finding) -> BehavioralFact:
    return make_fact(finding.subject, finding.predicate, finding.object, finding.confidence, finding.window,
                     finding.evidence, _provenance(finding), finding.entities)


def supporting_facts(
    finding: Finding,
    snap: GraphSnapshot,
    cfg: DetectorConfig,
    coeffs: ConfidenceCoefficients,
    min_probability: float = 0.2,
) -> list[BehavioralFact]:
    """Dominant outgoing transitions and high exits of every state the finding names."""
    prov = _provenance(finding)
    out = []
    for entity in finding.entities:
        kind, state = split_ref(entity)
        if kind != "state" or state not in snap.states:
            continue
        for key in sorted(k for k in snap.edge_counts if split_edge(k)[0] == state):
            dst = split_edge(key)[1]
            if dst == cfg.dropoff_outcome:
                ev = exit_support_evidence(snap, state, dst)
                if ev["p_dropoff"] >= min_probability:
                    out.append(make_fact(entity, "is_dropoff_point_for", outcome_ref(dst),
                                         confidence_for(ev, cfg, coeffs), snap.window, ev, prov))
                continue
            ev = transition_evidence(snap, state, dst)
            if ev["p"] < min_probability:
                continue
            obj = state_ref(dst) if dst in snap.states else outcome_ref(dst)
            out.append(make_fact(entity, "transitions_to", obj, confidence_for(ev, cfg, coeffs),
                                 snap.window, ev, prov))
    return out


def facts_from_findings(
    findings: Sequence[Finding],
    snapshots: Mapping[str, GraphSnapshot],
    cfg: DetectorConfig,
    coeffs: ConfidenceCoefficients,
    min_probability: float = 0.2,
) -> list[BehavioralFact]:
    """One primary fact per finding followed by its structural supporting facts."""
    out: list[BehavioralFact] = []
    for f in findings:
        out.append(primary_fact(f))
        out.extend(supporting_facts(f, snapshots[f.snapshot_ids[0]], cfg, coeffs, min_probability))
    return out
