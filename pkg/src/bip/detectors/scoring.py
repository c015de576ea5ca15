"""Composite interestingness score and the ranked insight feed."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Any

from bip.detectors.findings import DetectorKind, Finding
from bip.domain import DetectorConfig, ScoringWeights
from bip.errors import MissingComponent

COMPONENTS = ("significance", "magnitude", "reach", "actionability", "novelty")

DEFAULT_ACTIONABILITY: dict[DetectorKind, float] = {
    DetectorKind.TEMPORAL_REGRESSION: 0.9,
    DetectorKind.ACTIVATION_DRIVER: 0.8,
    DetectorKind.DROP_OFF_CLUSTER: 0.7,
    DetectorKind.SEGMENT_DIVERGENCE: 0.6,
    DetectorKind.UNEXPECTED_LOOP: 0.5,
    DetectorKind.PATH_QUALITY: 0.5,
}

NOVELTY_DECAY = 0.5
_REQUIRED = ("p_value", "effect", "population_reach", "sample_size", "kind")


@dataclass(frozen=True)
class ScoredInsight:
    finding: Finding
    components: Mapping[str, float]
    score: float
    rank: int = 0
    narrative: Mapping[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "rank": self.rank,
            "finding_id": self.finding.finding_id,
            "score": self.score,
            "components": dict(self.components),
            "insight_type": self.finding.kind,
            "detector": self.finding.detector.value,
            "subject": self.finding.subject,
            "predicate": self.finding.predicate,
            "object": self.finding.object,
            "confidence": {"score": self.finding.confidence[0], "label": self.finding.confidence[1]},
            "evidence": dict(self.finding.evidence),
            "window": self.finding.window.to_dict(),
        }
        if self.narrative is not None:
            d["content"] = dict(self.narrative)
        return d


def weighted_score(components: Sequence[float], weights: ScoringWeights) -> float:
    """Dot product of the five components with the weights, clamped to [0, 1]."""
    s = math.fsum(w * c for w, c in zip(weights.as_tuple(), components))
    return min(1.0, max(0.0, s))


def magnitude(ev: Mapping[str, Any]) -> float:
    kind = ev["kind"]
    if kind == "activation_driver":
        if ev.get("necessary"):
            return 1.0
        d = abs(ev["lift"] - 1.0)
        return d / (d + 1.0)
    if kind in ("dropoff_point", "dropoff_cluster"):
        return ev["exit_probability"]
    if kind == "regression":
        return 1.0 if ev["p_prev"] <= 0 else min(1.0, abs(ev["delta"]) / ev["p_prev"])
    if kind == "segment_divergence":
        return ev["jsd"]
    if kind == "reach_difference":
        top = max(ev["reach_a"], ev["reach_b"])
        return abs(ev["delta"]) / top if top > 0 else 0.0
    if kind == "repeated_visit":
        return min(1.0, ev["mean_visits"] / (2.0 * ev["tau_loop"])) if ev["tau_loop"] > 0 else 1.0
    if kind == "fast_path":
        return ev["relative_quality"]
    if kind == "optimization_target":
        return 1.0 - ev["relative_quality"]
    raise MissingComponent(f"no magnitude rule for evidence kind {kind!r}")


def novelty_streak(finding: Finding, history: Sequence[Sequence[Finding]]) -> int:
    """Consecutive prior snapshots (most recent first) holding an equivalent finding."""
    key = finding.equivalence_key()
    k = 0
    for prior in history:
        if not any(f.equivalence_key() == key for f in prior):
            break
        k += 1
    return k


def score_components(
    finding: Finding,
    cfg: DetectorConfig,
    history: Sequence[Sequence[Finding]] = (),
    actionability: Mapping[DetectorKind, float] | None = None,
) -> dict[str, float]:
    ev = finding.evidence
    missing = [k for k in _REQUIRED if k not in ev]
    if missing:
        raise MissingComponent(f"finding {finding.finding_id} lacks {', '.join(missing)}")
    table = actionability or DEFAULT_ACTIONABILITY
    n = ev["sample_size"]
    return {
        "significance": (1.0 - ev["p_value"]) * min(1.0, n / cfg.n_min),
        "magnitude": min(1.0, max(0.0, magnitude(ev))),
        "reach": finding.population_reach,
        "actionability": table[finding.detector],
        "novelty": NOVELTY_DECAY ** novelty_streak(finding, history),
    }


def score_interestingness(
    finding: Finding,
    weights: ScoringWeights,
    cfg: DetectorConfig,
    history: Sequence[Sequence[Finding]] = (),
    actionability: Mapping[DetectorKind, float] | None = None,
) -> ScoredInsight:
    comps = score_components(finding, cfg, history, actionability)
    return ScoredInsight(finding, comps, weighted_score([comps[c] for c in COMPONENTS], weights))


def rank_feed(insights: Sequence[ScoredInsight]) -> list[ScoredInsight]:
    """Descending score, ties by finding id; ranks start at 1."""
    ordered = sorted(insights, key=lambda s: (-s.score, s.finding.finding_id))
    return [ScoredInsight(s.finding, s.components, s.score, i + 1, s.narrative) for i, s in enumerate(ordered)]
