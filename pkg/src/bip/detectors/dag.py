"""Detector jobs as a DAG: topological levels, parallel execution within a level, deterministic merge."""

from __future__ import annotations

import itertools
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

from bip.detectors import builtin
from bip.detectors.findings import DetectorKind, Finding, sort_findings
from bip.detectors.scoring import ScoredInsight, rank_feed, score_interestingness
from bip.domain import ConfidenceCoefficients, DetectorConfig, ScoringWeights
from bip.errors import ConfigError, CycleDetected
from bip.graph import GraphSnapshot
from bip.markov import compute_metrics


@dataclass(frozen=True)
class DetectorInputs:
    current: GraphSnapshot | None
    previous: GraphSnapshot | None = None
    segments: tuple[GraphSnapshot, ...] = ()
    releases: tuple[tuple[str, int], ...] = ()


@dataclass(frozen=True)
class Job:
    """A node of the detector DAG.

    ``run`` receives the inputs, the configuration and the outputs of the
    jobs named in ``depends_on``. Jobs with a ``kind`` produce findings.
    """

    name: str
    run: Callable[[DetectorInputs, DetectorConfig, ConfidenceCoefficients, Mapping[str, Any]], Any]
    depends_on: tuple[str, ...] = ()
    kind: DetectorKind | None = None


@dataclass
class DagResult:
    findings: list[Finding]
    feed: list[ScoredInsight]
    levels: list[list[str]]
    errors: dict[str, str] = field(default_factory=dict)


def topological_levels(registry: Sequence[Job]) -> list[list[str]]:
    """Group job names by longest-path depth; level 1 holds jobs without dependencies."""
    jobs = {j.name: j for j in registry}
    if len(jobs) != len(registry):
        raise ConfigError("duplicate job names in detector registry")
    for j in registry:
        for d in j.depends_on:
            if d not in jobs:
                raise ConfigError(f"job {j.name!r} depends on unknown job {d!r}")
    depth: dict[str, int] = {}
    visiting: set[str] = set()

    def visit(name: str) -> int:
        if name in depth:
            return depth[name]
        if name in visiting:
            raise CycleDetected(f"detector registry has a cycle through {name!r}")
        visiting.add(name)
        level = 1 + max((visit(d) for d in jobs[name].depends_on), default=0)
        visiting.discard(name)
        depth[name] = level
        return level

    for name in sorted(jobs):
        visit(name)
    out: list[list[str]] = [[] for _ in range(max(depth.values(), default=0))]
    for name in sorted(depth):
        out[depth[name] - 1].append(name)
    return out


# -- default registry --------------------------------------------------------


def _input(attr: str):
    return lambda inputs, cfg, coeffs, deps: getattr(inputs, attr)


def _metrics(inputs, cfg, coeffs, deps):
    snap = deps["input:current"]
    return compute_metrics(snap) if snap is not None else None


def _activation(inputs, cfg, coeffs, deps):
    m = deps["metrics"]
    return builtin.detect_activation_drivers(inputs.current, m, cfg, coeffs) if m is not None else []


def _dropoff(inputs, cfg, coeffs, deps):
    m = deps["metrics"]
    return builtin.detect_dropoffs(inputs.current, m, cfg, coeffs) if m is not None else []


def _regression(inputs, cfg, coeffs, deps):
    prev, curr = deps["input:previous"], deps["input:current"]
    if prev is None or curr is None:
        return []
    return builtin.detect_regressions(prev, curr, inputs.releases, cfg, coeffs)


def _divergence(inputs, cfg, coeffs, deps):
    segs = deps["input:segments"]
    out: list[Finding] = []
    for a, b in itertools.combinations(segs, 2):
        out.extend(builtin.detect_segment_divergence(a, b, cfg, coeffs))
    return out


def _loops(inputs, cfg, coeffs, deps):
    snap = deps["input:current"]
    return builtin.detect_repeated_visits(snap, cfg, coeffs) if snap is not None else []


def _paths(inputs, cfg, coeffs, deps):
    snap = deps["input:current"]
    return builtin.detect_path_quality(snap, cfg, coeffs) if snap is not None else []


DEFAULT_REGISTRY: tuple[Job, ...] = (
    Job("input:current", _input("current")),
    Job("input:previous", _input("previous")),
    Job("input:segments", _input("segments")),
    Job("metrics", _metrics, ("input:current",)),
    Job("ActivationDriver", _activation, ("metrics",), DetectorKind.ACTIVATION_DRIVER),
    Job("DropOffCluster", _dropoff, ("metrics",), DetectorKind.DROP_OFF_CLUSTER),
    Job("TemporalRegression", _regression, ("input:previous", "input:current"), DetectorKind.TEMPORAL_REGRESSION),
    Job("SegmentDivergence", _divergence, ("input:segments",), DetectorKind.SEGMENT_DIVERGENCE),
    Job("UnexpectedLoop", _loops, ("input:current",), DetectorKind.UNEXPECTED_LOOP),
    Job("PathQuality", _paths, ("input:current",), DetectorKind.PATH_QUALITY),
)


def run_detector_dag(
    inputs: DetectorInputs,
    cfg: DetectorConfig,
    weights: ScoringWeights,
    registry: Sequence[Job] = DEFAULT_REGISTRY,
    coeffs: ConfidenceCoefficients = ConfidenceCoefficients(),
    history: Sequence[Sequence[Finding]] = (),
    actionability: Mapping[DetectorKind, float] | None = None,
    workers: int = 1,
) -> DagResult:
    """Run every job level by level; a failing job only loses its own output and its dependents'."""
    levels = topological_levels(registry)
    jobs = {j.name: j for j in registry}
    results: dict[str, Any] = {}
    errors: dict[str, str] = {}

    def run(name: str) -> tuple[str, Any, str | None]:
        job = jobs[name]
        failed = [d for d in job.depends_on if d in errors]
        if failed:
            return name, None, f"skipped: dependency {failed[0]} failed"
        deps = {d: results[d] for d in job.depends_on}
        try:
            return name, job.run(inputs, cfg, coeffs, deps), None
        except Exception as exc:  # isolate the failing detector
            return name, None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for level in levels:
            for name, value, err in pool.map(run, level):
                if err is None:
                    results[name] = value
                else:
                    errors[name] = err

    findings: list[Finding] = []
    for name, job in jobs.items():
        if job.kind is not None and name in results:
            findings.extend(results[name])
    findings = sort_findings(findings)
    feed = rank_feed([score_interestingness(f, weights, cfg, history, actionability) for f in findings])
    return DagResult(findings, feed, levels, errors)
