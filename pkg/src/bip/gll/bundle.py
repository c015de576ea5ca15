"""Fact bundles: the minimal one-hop set of facts behind a finding, and its canonical rendering."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

from bip.bkg import BehavioralFact, FactStore
from bip.canonical import content_hash
from bip.detectors.findings import Finding
from bip.errors import NoFacts
from bip.vocab import is_hub, split_ref

# Keys already shown in the header lines of a rendered fact.
_NAME_KEYS = frozenset({"kind", "state", "outcome", "src", "dst", "entity", "path", "segment_a", "segment_b"})

_LEAD_KEYS: dict[str, tuple[str, ...]] = {
    "activation_driver": ("reach_rate", "p_reached", "p_not_reached", "lift", "removal_effect", "sample_size"),
    "dropoff_point": ("exit_probability", "baseline_exit", "reach_rate", "sample_size"),
    "dropoff_cluster": ("members", "exit_probability", "baseline_exit", "reach_rate", "sample_size"),
    "regression": ("p_prev", "p_curr", "delta", "sample_size"),
    "segment_divergence": ("jsd", "conv_a", "conv_b", "sample_size"),
    "reach_difference": ("reach_a", "reach_b", "delta", "sample_size"),
    "repeated_visit": ("mean_visits", "affected_fraction", "back_edge_from", "sample_size"),
    "fast_path": ("conversion_rate", "quality", "relative_quality", "length", "sample_size"),
    "optimization_target": ("conversion_rate", "quality", "relative_quality", "occurrence", "sample_size"),
    "transition": ("p",),
    "exit_probability": ("p_dropoff",),
}

_SUBJECT_LABELS = {"state": "State", "edge": "Edge", "segment": "Segment", "path": "Path", "outcome": "Outcome"}


def fmt(value: Any) -> str:
    """Display rule: integers with thousands separators, reals to two decimals, strings verbatim."""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return f"{value:,}"
    if isinstance(value, float):
        text = f"{value:.2f}"
        return "0.00" if text == "-0.00" else text
    return str(value)


def display_name(entity: str) -> str:
    return split_ref(entity)[1] or entity


def evidence_label(key: str, ev: Mapping[str, Any]) -> str:
    outcome = ev.get("outcome", "converted")
    if key == "p_reached":
        return f"P({outcome} | reached)"
    if key == "p_not_reached":
        return f"P({outcome} | not reached)"
    return key


def ordered_evidence(ev: Mapping[str, Any]) -> list[tuple[str, Any]]:
    lead = [k for k in _LEAD_KEYS.get(ev.get("kind", ""), ()) if k in ev]
    rest = sorted(k for k in ev if k not in lead and k not in _NAME_KEYS)
    return [(k, ev[k]) for k in lead + rest]


def render_fact_line(fact: BehavioralFact) -> str:
    parts = [f"{k}={fmt(v)}" for k, v in ordered_evidence(fact.evidence)]
    parts.append(f"confidence={fact.confidence[1]}")
    return (f'"{display_name(fact.subject)}" {fact.predicate} "{display_name(fact.object)}"'
            f" ({', '.join(parts)})")


def render_context(primary: BehavioralFact, supporting: Sequence[BehavioralFact]) -> str:
    ev = primary.evidence
    kind, _ = split_ref(primary.subject)
    lines = [
        f"Finding: {ev.get('kind', primary.predicate)}",
        f'{_SUBJECT_LABELS.get(kind, "Subject")}: "{display_name(primary.subject)}"',
        f"Predicate: {primary.predicate}",
        f"Object: {primary.object}",
        "Evidence:",
    ]
    lines += [f"  - {evidence_label(k, ev)}: {fmt(v)}" for k, v in ordered_evidence(ev)]
    lines.append(f"  - confidence: {primary.confidence[1]}")
    lines.append("Supporting facts:")
    lines += [f"  - {render_fact_line(f)}" for f in supporting]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class BundleLimits:
    max_facts: int = 8
    min_confidence: float = 0.0

    def __post_init__(self) -> None:
        if self.max_facts < 1:
            raise ValueError("max_facts must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {"max_facts": self.max_facts, "min_confidence": self.min_confidence}


@dataclass(frozen=True)
class FactBundle:
    bundle_id: str
    finding_id: str
    primary_fact: BehavioralFact
    supporting_facts: tuple[BehavioralFact, ...]
    rendered_context: str
    limits: BundleLimits = field(default_factory=BundleLimits)

    @property
    def facts(self) -> tuple[BehavioralFact, ...]:
        return (self.primary_fact, *self.supporting_facts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "bundle_id": self.bundle_id,
            "finding_id": self.finding_id,
            "primary_fact_id": self.primary_fact.fact_id,
            "supporting_fact_ids": [f.fact_id for f in self.supporting_facts],
            "rendered_context": self.rendered_context,
            "limits": self.limits.to_dict(),
        }


def assemble_bundle(
    finding_id: str, primary: BehavioralFact, neighborhood: Sequence[BehavioralFact], limits: BundleLimits
) -> FactBundle:
    """Primary fact first, then the strongest neighbors up to ``max_facts`` in total."""
    supporting = tuple(f for f in neighborhood if f.fact_id != primary.fact_id)[: limits.max_facts - 1]
    text = render_context(primary, supporting)
    bid = content_hash([finding_id, primary.fact_id, [f.fact_id for f in supporting], text], prefix="bundle-")
    return FactBundle(bid, finding_id, primary, supporting, text, limits)


def build_fact_bundle(finding: Finding, store: FactStore, limits: BundleLimits = BundleLimits()) -> FactBundle:
    primary = store.primary_for(finding)
    if primary is None or primary.confidence[0] < limits.min_confidence:
        raise NoFacts(f"no stored fact for finding {finding.finding_id}")
    seeds = [e for e in finding.entities if not is_hub(e)] or list(finding.entities)
    # the primary fact takes one slot; fetch enough neighbors to fill the rest
    hood = store.one_hop(seeds, limits.max_facts + 1, finding.window, limits.min_confidence)
    return assemble_bundle(finding.finding_id, primary, hood, limits)
