"""The six built-in detectors. Each is a pure function of immutable snapshots."""

from __future__ import annotations

import logging
from collections.abc import Sequence

from bip.detectors.evidence import (
    Releases,
    activation_evidence,
    confidence_for,
    divergence_evidence,
    dropoff_evidence,
    loop_evidence,
    path_evidence,
    path_table,
    reach_difference_evidence,
    regression_evidence,
)
from bip.detectors.findings import DetectorKind, Finding, make_finding, sort_findings
from bip.domain import ConfidenceCoefficients, DetectorConfig
from bip.errors import WindowMismatch
from bip.graph import GraphSnapshot, split_edge
from bip.markov import ChainMetrics, Conditionals, candidate_filter
from bip.stats import check_consecutive
from bip.vocab import outcome_ref, ref, state_ref

log = logging.getLogger(__name__)

# Paths at or below this share of the best quality in the deployment are
# optimization targets when they are also common.
OPTIMIZATION_QUALITY_CEILING = 0.5

_DEFAULT_COEFFS = ConfidenceCoefficients()


def _emit(kind, snaps, entities, predicate, obj, ev, cfg, coeffs, window) -> Finding:
    return make_finding(kind, tuple(s.snapshot_id for s in snaps), tuple(entities), predicate, obj, ev,
                        confidence_for(ev, cfg, coeffs), window)


def detect_activation_drivers(
    snap: GraphSnapshot, metrics: ChainMetrics, cfg: DetectorConfig,
    coeffs: ConfidenceCoefficients = _DEFAULT_COEFFS,
) -> list[Finding]:
    target = cfg.target_outcome
    if target not in metrics.chain.absorbing_states:
        return []
    starts = set(metrics.start)
    necessary: list[str] = []
    passing: dict[str, Conditionals] = {}
    for s in snap.states:
        if s in starts:
            continue
        c = metrics.conditionals[s][target]
        if c.n_reached < cfg.tau_n or snap.reach.get(s, 0.0) < cfg.tau_reach:
            continue
        if c.status == "necessary_for_conversion":
            necessary.append(s)
        elif c.lift is not None and c.lift >= cfg.tau_lift:
            passing[s] = c
    candidates = candidate_filter(passing, snap.reach, cfg.tau_candidate)
    out: list[Finding] = []
    for s in necessary:
        ev = activation_evidence(snap, s, cfg, metrics.chain)
        out.append(_emit(DetectorKind.ACTIVATION_DRIVER, [snap], [state_ref(s)], "necessary_for_conversion",
                         outcome_ref(target), ev, cfg, coeffs, snap.window))
    scored = [(activation_evidence(snap, s, cfg, metrics.chain), s) for s in candidates]
    scored.sort(key=lambda t: (-t[0]["removal_effect"], t[1]))
    for ev, s in scored[: cfg.top_k]:
        out.append(_emit(DetectorKind.ACTIVATION_DRIVER, [snap], [state_ref(s)], "is_activation_driver_for",
                         outcome_ref(target), ev, cfg, coeffs, snap.window))
    return out


def activation_ranking(findings: Sequence[Finding]) -> list[str]:
    """States of regular activation-driver findings in emission order (descending removal effect)."""
    return [f.subject.split(":", 1)[1] for f in findings if f.predicate == "is_activation_driver_for"]


def _components(nodes: Sequence[str], adjacent) -> list[list[str]]:
    remaining = set(nodes)
    groups = []
    for s in nodes:
        if s not in remaining:
            continue
        remaining.discard(s)
        group, stack = [s], [s]
        while stack:
            u = stack.pop()
            for v in sorted(remaining):
                if adjacent(u, v):
                    remaining.discard(v)
                    group.append(v)
                    stack.append(v)
        groups.append(sorted(group))
    return groups


def detect_dropoffs(
    snap: GraphSnapshot, metrics: ChainMetrics, cfg: DetectorConfig,
    coeffs: ConfidenceCoefficients = _DEFAULT_COEFFS,
) -> list[Finding]:
    chain = metrics.chain
    if cfg.dropoff_outcome not in chain.absorbing_states:
        return []
    d = chain.absorbing_states.index(cfg.dropoff_outcome)
    flagged = [
        s for s in chain.transient_states
        if chain.R[chain.index(s), d] >= cfg.tau_exit and snap.reach.get(s, 0.0) >= cfg.tau_reach
    ]

    def adjacent(u: str, v: str) -> bool:
        return chain.Q[chain.index(u), chain.index(v)] > 0 or chain.Q[chain.index(v), chain.index(u)] > 0

    out = []
    for group in _components(flagged, adjacent):
        ev = dropoff_evidence(snap, group, cfg)
        out.append(_emit(DetectorKind.DROP_OFF_CLUSTER, [snap], [state_ref(s) for s in group],
                         "is_dropoff_point_for", outcome_ref(cfg.dropoff_outcome), ev, cfg, coeffs, snap.window))
    return out


def detect_regressions(
    prev: GraphSnapshot, curr: GraphSnapshot, releases: Releases, cfg: DetectorConfig,
    coeffs: ConfidenceCoefficients = _DEFAULT_COEFFS,
) -> list[Finding]:
    check_consecutive(prev, curr)
    out = []
    for key in sorted(set(prev.edge_counts) | set(curr.edge_counts)):
        src, dst = split_edge(key)
        ev = regression_evidence(prev, curr, (src, dst), releases, cfg)
        if ev["delta"] >= 0 or ev["p_value"] > cfg.significance_alpha:
            continue
        if ev["release_link"] == "anchored":
            predicate, obj = "regressed_after", ref("release", ev["release_id"])
        else:
            predicate, obj = "changed_after", ref("snapshot", prev.snapshot_id)
        entities = [ref("edge", key), state_ref(src)]
        if dst in curr.states or dst in prev.states:
            entities.append(state_ref(dst))
        out.append(_emit(DetectorKind.TEMPORAL_REGRESSION, [curr, prev], entities, predicate, obj, ev,
                         cfg, coeffs, curr.window))
    return out


def detect_segment_divergence(
    a: GraphSnapshot, b: GraphSnapshot, cfg: DetectorConfig,
    coeffs: ConfidenceCoefficients = _DEFAULT_COEFFS,
) -> list[Finding]:
    if a.journey_id != b.journey_id or a.window != b.window:
        raise WindowMismatch("segment snapshots must share journey and window")
    seg_a, seg_b = ref("segment", a.segment_id), ref("segment", b.segment_id)
    out = []
    ev = divergence_evidence(a, b, cfg)
    if ev["jsd"] > cfg.tau_divergence:
        out.append(_emit(DetectorKind.SEGMENT_DIVERGENCE, [a, b], [seg_a, seg_b], "diverges_from", seg_b,
                         ev, cfg, coeffs, a.window))
    entities = [state_ref(s) for s in sorted(set(a.states) | set(b.states))]
    entities += [outcome_ref(o) for o in sorted(set(a.outcome_counts) | set(b.outcome_counts))]
    for entity in entities:
        ev = reach_difference_evidence(a, b, entity, cfg)
        if ev["p_value"] > cfg.significance_alpha or abs(ev["delta"]) < cfg.tau_reach_delta:
            continue
        predicate = "more_common_in" if ev["delta"] > 0 else "less_common_in"
        out.append(_emit(DetectorKind.SEGMENT_DIVERGENCE, [a, b], [entity, seg_a, seg_b], predicate, seg_a,
                         ev, cfg, coeffs, a.window))
    return out


def detect_repeated_visits(
    snap: GraphSnapshot, cfg: DetectorConfig, coeffs: ConfidenceCoefficients = _DEFAULT_COEFFS,
) -> list[Finding]:
    if cfg.tau_loop <= 1.0:
        log.warning("tau_loop=%s flags every reached state", cfg.tau_loop)
    out = []
    for s in snap.states:
        st = snap.state_stats[s]
        if not st.reached or st.visits / st.reached <= cfg.tau_loop:
            continue
        ev = loop_evidence(snap, s, cfg)
        entities = [state_ref(s)]
        if ev["back_edge_from"]:
            entities.append(state_ref(ev["back_edge_from"]))
        out.append(_emit(DetectorKind.UNEXPECTED_LOOP, [snap], entities, "exhibits_loop", entities[-1],
                         ev, cfg, coeffs, snap.window))
    return out


def rank_paths(snap: GraphSnapshot, cfg: DetectorConfig) -> list[dict]:
    """Path table ordered by quality descending, ties by path key."""
    return sorted(path_table(snap, cfg), key=lambda r: (-r["quality"], r["path"].key))


def _path_entities(key: str, states: Sequence[str]) -> list[str]:
    return [ref("path", key)] + [state_ref(s) for s in dict.fromkeys(states)]


def detect_path_quality(
    snap: GraphSnapshot, cfg: DetectorConfig, coeffs: ConfidenceCoefficients = _DEFAULT_COEFFS,
) -> list[Finding]:
    target = cfg.target_outcome
    rows = rank_paths(snap, cfg)
    out = []
    # paths observed fewer than tau_n times are too thin to report either way
    fast = [r for r in rows if r["path"].outcome == target and r["path"].occurrence >= cfg.tau_n]
    fast = fast[: cfg.top_fast_paths]
    for r in fast:
        p = r["path"]
        ev = path_evidence(snap, p.key, "fast_path", cfg)
        out.append(_emit(DetectorKind.PATH_QUALITY, [snap], _path_entities(p.key, p.states), "is_fast_path_to",
                         outcome_ref(target), ev, cfg, coeffs, snap.window))
    seen = {r["path"].states for r in fast}
    slow = []
    for r in sorted(rows, key=lambda r: (-r["path"].occurrence, r["path"].key)):
        p = r["path"]
        if p.states in seen or p.occurrence < cfg.tau_n:
            continue
        ev = path_evidence(snap, p.key, "optimization_target", cfg)
        if ev["relative_quality"] <= OPTIMIZATION_QUALITY_CEILING:
            seen.add(p.states)
            slow.append((p, ev))
    for p, ev in slow[: cfg.top_fast_paths]:
        out.append(_emit(DetectorKind.PATH_QUALITY, [snap], _path_entities(p.key, p.states),
                         "is_optimization_target", outcome_ref(target), ev, cfg, coeffs, snap.window))
    return out


def run_all(
    snap: GraphSnapshot, metrics: ChainMetrics, cfg: DetectorConfig,
    coeffs: ConfidenceCoefficients = _DEFAULT_COEFFS,
) -> list[Finding]:
    """Single-snapshot detectors, merged in canonical order."""
    return sort_findings(
        detect_activation_drivers(snap, metrics, cfg, coeffs)
        + detect_dropoffs(snap, metrics, cfg, coeffs)
        + detect_repeated_visits(snap, cfg, coeffs)
        + detect_path_quality(snap, cfg, coeffs)
    )
