"""Typed detector output."""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass
from enum import Enum
from typing import Any

from bip.canonical import SCHEMA_VERSION, content_hash
from bip.domain import TimeWindow, format_timestamp, parse_timestamp


class DetectorKind(str, Enum):
    ACTIVATION_DRIVER = "ActivationDriver"
    DROP_OFF_CLUSTER = "DropOffCluster"
    TEMPORAL_REGRESSION = "TemporalRegression"
    SEGMENT_DIVERGENCE = "SegmentDivergence"
    UNEXPECTED_LOOP = "UnexpectedLoop"
    PATH_QUALITY = "PathQuality"


DETECTOR_ORDER = {k: i for i, k in enumerate(DetectorKind)}

# Bump on any change to a detector's logic; golden fixtures are pinned per version.
DETECTOR_VERSIONS: dict[DetectorKind, str] = {
    DetectorKind.ACTIVATION_DRIVER: "1.0.0",
    DetectorKind.DROP_OFF_CLUSTER: "1.0.0",
    DetectorKind.TEMPORAL_REGRESSION: "1.0.0",
    DetectorKind.SEGMENT_DIVERGENCE: "1.0.0",
    DetectorKind.UNEXPECTED_LOOP: "1.0.0",
    DetectorKind.PATH_QUALITY: "1.0.0",
}

Evidence = Mapping[str, Any]


@dataclass(frozen=True)
class Finding:
    finding_id: str
    detector: DetectorKind
    detector_version: str
    snapshot_ids: tuple[str, ...]
    entities: tuple[str, ...]
    predicate: str
    object: str
    evidence: Evidence
    confidence: tuple[float, str]
    population_reach: float
    window: TimeWindow
    created_at: int

    @property
    def kind(self) -> str:
        return self.evidence["kind"]

    @property
    def subject(self) -> str:
        return self.entities[0]

    def equivalence_key(self) -> tuple:
        return (self.detector.value, self.entities, self.predicate)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "finding_id": self.finding_id,
            "detector": self.detector.value,
            "detector_version": self.detector_version,
            "snapshot_ids": list(self.snapshot_ids),
            "entities": list(self.entities),
            "predicate": self.predicate,
            "object": self.object,
            "evidence": dict(self.evidence),
            "confidence": {"score": self.confidence[0], "label": self.confidence[1]},
            "population_reach": self.population_reach,
            "window": self.window.to_dict(),
            "created_at": format_timestamp(self.created_at),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Finding:
        return cls(
            finding_id=d["finding_id"],
            detector=DetectorKind(d["detector"]),
            detector_version=d["detector_version"],
            snapshot_ids=tuple(d["snapshot_ids"]),
            entities=tuple(d["entities"]),
            predicate=d["predicate"],
            object=d["object"],
            evidence=dict(d["evidence"]),
            confidence=(d["confidence"]["score"], d["confidence"]["label"]),
            population_reach=d["population_reach"],
            window=TimeWindow.from_dict(d["window"]),
            created_at=parse_timestamp(d["created_at"]),
        )


def make_finding(
    detector: DetectorKind,
    snapshot_ids: tuple[str, ...],
    entities: tuple[str, ...],
    predicate: str,
    obj: str,
    evidence: Evidence,
    confidence: tuple[float, str],
    window: TimeWindow,
) -> Finding:
    for key, value in evidence.items():
        if isinstance(value, float) and not math.isfinite(value):
            raise ValueError(f"evidence {key} is not finite")
    version = DETECTOR_VERSIONS[detector]
    ident = content_hash(
        [detector.value, version, list(snapshot_ids), list(entities), predicate, obj, dict(evidence)],
        prefix="find-",
    )
    return Finding(ident, detector, version, snapshot_ids, entities, predicate, obj, dict(evidence),
                   confidence, float(evidence["population_reach"]), window, window.end)


def sort_findings(findings: list[Finding]) -> list[Finding]:
    return sorted(findings, key=lambda f: (DETECTOR_ORDER[f.detector], f.finding_id))
