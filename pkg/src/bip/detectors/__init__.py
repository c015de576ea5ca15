"""Deterministic detectors, interestingness scoring and DAG orchestration."""

from __future__ import annotations

from bip.detectors.builtin import (
    activation_ranking,
    detect_activation_drivers,
    detect_dropoffs,
    detect_path_quality,
    detect_regressions,
    detect_repeated_visits,
    detect_segment_divergence,
    rank_paths,
    run_all,
)
from bip.detectors.dag import DEFAULT_REGISTRY, DagResult, DetectorInputs, Job, run_detector_dag, topological_levels
from bip.detectors.evidence import path_quality_score, recompute_evidence
from bip.detectors.findings import DETECTOR_VERSIONS, DetectorKind, Finding, make_finding, sort_findings
from bip.detectors.scoring import (
    COMPONENTS,
    DEFAULT_ACTIONABILITY,
    ScoredInsight,
    rank_feed,
    score_components,
    score_interestingness,
    weighted_score,
)

__all__ = [
    "COMPONENTS",
    "DEFAULT_ACTIONABILITY",
    "DEFAULT_REGISTRY",
    "DETECTOR_VERSIONS",
    "DagResult",
    "DetectorInputs",
    "DetectorKind",
    "Finding",
    "Job",
    "ScoredInsight",
    "activation_ranking",
    "detect_activation_drivers",
    "detect_dropoffs",
    "detect_path_quality",
    "detect_regressions",
    "detect_repeated_visits",
    "detect_segment_divergence",
    "make_finding",
    "path_quality_score",
    "rank_feed",
    "rank_paths",
    "recompute_evidence",
    "run_all",
    "run_detector_dag",
    "score_components",
    "score_interestingness",
    "sort_findings",
    "topological_levels",
    "weighted_score",
]
