"""Evidence payloads, one function per finding kind.

Every function reads only snapshot contents and configuration, so the audit
can rebuild any stored payload from the provenance snapshot and compare.
"""

from __future__ import annotations

import math
import statistics
from collections.abc import Mapping, Sequence
from typing import Any

from bip.domain import ConfidenceCoefficients, DetectorConfig, format_timestamp
from bip.errors import UnknownState
from bip.graph import GraphSnapshot, PathStat, edge_key
from bip.markov import (
    LIFT_DISPLAY_CAP,
    AbsorbingChain,
    fundamental_matrix,
    removal_effect,
    snapshot_conditionals,
)
from bip.stats import (
    Z_CAP,
    clamp_z,
    confidence_score,
    edge_exposure,
    js_divergence,
    transition_delta,
    two_proportion_z,
    two_sided_p,
)

Releases = Sequence[tuple[str, int]]


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def _start(snap: GraphSnapshot) -> str | dict[str, float]:
    dist = snap.start_distribution()
    return next(iter(dist)) if len(dist) == 1 else dist


def _test(k1: int, n1: int, k2: int, n2: int, n_min: int) -> tuple[float, float]:
    if n1 < 1 or n2 < 1:
        return 0.0, 1.0
    t = two_proportion_z(k1, n1, k2, n2, n_min)
    return clamp_z(t.z), t.p_value


def wald_z(p: float, n: int) -> tuple[float, float]:
    """z of a proportion against zero, capped for degenerate variance."""
    if n < 1 or p <= 0:
        return 0.0, 1.0
    se = math.sqrt(p * (1 - p) / n)
    z = Z_CAP if se == 0 else clamp_z(p / se)
    return z, two_sided_p(z)


def confidence_for(ev: Mapping[str, Any], cfg: DetectorConfig, coeffs: ConfidenceCoefficients) -> tuple[float, str]:
    return confidence_score(abs(ev["z"]), max(1, int(ev["sample_size"])), ev["effect"], coeffs, cfg.n_min)


def state_population_reach(snap: GraphSnapshot, state: str) -> float:
    st = snap.state_stats.get(state)
    return _ratio(st.actors if st else 0, snap.n_actors)


# -- activation drivers ----------------------------------------------------


def activation_evidence(
    snap: GraphSnapshot, state: str, cfg: DetectorConfig, chain: AbsorbingChain | None = None
) -> dict[str, Any]:
    chain = chain or AbsorbingChain.from_snapshot(snap)
    target = cfg.target_outcome
    c = snapshot_conditionals(snap, state, target)
    z, p = _test(c.successes_reached, c.n_reached, c.successes_not_reached, c.n_not_reached, cfg.n_min)
    start = _start(snap)
    ev: dict[str, Any] = {
        "kind": "activation_driver",
        "state": state,
        "outcome": target,
        "reach_rate": snap.reach.get(state, 0.0),
        "p_reached": c.p_reached if c.p_reached is not None else 0.0,
        "p_not_reached": c.p_not_reached if c.p_not_reached is not None else 0.0,
        "removal_effect": removal_effect(chain, start, state, target, cfg.dropoff_outcome),
        "sample_size": c.n_reached,
        "n_not_reached": c.n_not_reached,
        "n_journeys": snap.n_journeys,
        "z": z,
        "p_value": p,
        "effect": (c.p_reached or 0.0) - (c.p_not_reached or 0.0),
        "population_reach": state_population_reach(snap, state),
        "multi_start": int(not isinstance(start, str)),
        "necessary": int(c.status == "necessary_for_conversion"),
    }
    if c.lift is not None:
        ev["lift"] = c.lift
        ev["lift_display"] = min(c.lift, LIFT_DISPLAY_CAP)
    else:
        ev["lift_display"] = LIFT_DISPLAY_CAP
    return ev


# -- drop-off ----------------------------------------------------------------


def _exit_counts(snap: GraphSnapshot, states: Sequence[str], outcome: str) -> tuple[int, int, int, int]:
    exits = out = total_exits = total_out = 0
    members = set(states)
    for s in snap.states:
        k, n = edge_exposure(snap, s, outcome)
        total_exits += k
        total_out += n
        if s in members:
            exits += k
            out += n
    return exits, out, total_exits - exits, total_out - out


def dropoff_evidence(snap: GraphSnapshot, states: Sequence[str], cfg: DetectorConfig) -> dict[str, Any]:
    """Exit evidence for one state (``dropoff_point``) or a cluster of states (``dropoff_cluster``)."""
    outcome = cfg.dropoff_outcome
    for s in states:
        if s not in snap.states:
            raise UnknownState(s)
    exits, out, other_exits, other_out = _exit_counts(snap, states, outcome)
    z, p = _test(exits, out, other_exits, other_out, cfg.n_min)
    exit_p = _ratio(exits, out)
    baseline = _ratio(other_exits, other_out)
    chain = AbsorbingChain.from_snapshot(snap)
    N = fundamental_matrix(chain)
    ev: dict[str, Any] = {
        "kind": "dropoff_point" if len(states) == 1 else "dropoff_cluster",
        "outcome": outcome,
        "exit_probability": exit_p,
        "baseline_exit": baseline,
        "reach_rate": max(snap.reach.get(s, 0.0) for s in states),
        "expected_steps": max(float(N[chain.index(s)].sum()) for s in states),
        "sample_size": out,
        "z": z,
        "p_value": p,
        "effect": exit_p - baseline,
        "population_reach": max(state_population_reach(snap, s) for s in states),
    }
    if len(states) == 1:
        ev["state"] = states[0]
    else:
        ev["members"] = ",".join(states)
    return ev


def exit_support_evidence(snap: GraphSnapshot, state: str, outcome: str) -> dict[str, Any]:
    k, n = edge_exposure(snap, state, outcome)
    p = _ratio(k, n)
    z, pv = wald_z(p, n)
    return {
        "kind": "exit_probability",
        "state": state,
        "outcome": outcome,
        "p_dropoff": p,
        "sample_size": n,
        "z": z,
        "p_value": pv,
        "effect": p,
        "population_reach": _ratio(snap.edge_actors.get(edge_key(state, outcome), 0), snap.n_actors),
    }


def transition_evidence(snap: GraphSnapshot, src: str, dst: str) -> dict[str, Any]:
    k, n = edge_exposure(snap, src, dst)
    p = _ratio(k, n)
    z, pv = wald_z(p, n)
    return {
        "kind": "transition",
        "src": src,
        "dst": dst,
        "p": p,
        "count": k,
        "sample_size": n,
        "z": z,
        "p_value": pv,
        "effect": p,
        "population_reach": _ratio(snap.edge_actors.get(edge_key(src, dst), 0), snap.n_actors),
    }


# -- regressions -------------------------------------------------------------


def regression_evidence(
    prev: GraphSnapshot, curr: GraphSnapshot, edge: tuple[str, str], releases: Releases, cfg: DetectorConfig
) -> dict[str, Any]:
    d = transition_delta(prev, curr, edge, releases, cfg.n_min)
    return {
        "kind": "regression",
        "src": edge[0],
        "dst": edge[1],
        "p_prev": d.p_prev,
        "p_curr": d.p_curr,
        "delta": d.delta,
        "n_prev": d.test.n2,
        "n_curr": d.test.n1,
        "sample_size": d.test.n1,
        "z": clamp_z(d.test.z),
        "p_value": d.test.p_value,
        "effect": d.delta,
        "low_power": int(d.test.low_power),
        "release_link": d.release_link.value,
        "release_id": d.release_id or "",
        "ambiguous": int(d.release_link.value == "ambiguous"),
        "baseline_snapshot_id": prev.snapshot_id,
        "change_point": format_timestamp(prev.window.end),
        "population_reach": state_population_reach(curr, edge[0]),
    }


# -- segments ----------------------------------------------------------------


def segment_jsd(a: GraphSnapshot, b: GraphSnapshot) -> float:
    """Pooled-reach weighted mean of per-state JSDs between outgoing distributions.

    A state with no outgoing mass in either segment has no distribution to
    compare and is left out; its absence shows up in reach differences instead.
    """
    total_w = 0.0
    acc = 0.0
    n = a.n_journeys + b.n_journeys
    for s in sorted(set(a.states) & set(b.states)):
        pa, pb = _normalized(a.outgoing(s)), _normalized(b.outgoing(s))
        if not pa or not pb:
            continue
        w = (a.state_stats[s].reached + b.state_stats[s].reached) / n
        acc += w * js_divergence(pa, pb)
        total_w += w
    return acc / total_w if total_w else 0.0


def _normalized(dist: Mapping[str, float]) -> dict[str, float]:
    # rows of censored-only states carry deficit mass
    total = math.fsum(dist.values())
    return {k: v / total for k, v in dist.items()} if total > 0 else {}


def divergence_evidence(a: GraphSnapshot, b: GraphSnapshot, cfg: DetectorConfig) -> dict[str, Any]:
    target = cfg.target_outcome
    ka, kb = a.outcome_counts.get(target, 0), b.outcome_counts.get(target, 0)
    z, p = _test(ka, a.n_journeys, kb, b.n_journeys, cfg.n_min)
    conv_a, conv_b = ka / a.n_journeys, kb / b.n_journeys
    return {
        "kind": "segment_divergence",
        "segment_a": a.segment_id,
        "segment_b": b.segment_id,
        "jsd": segment_jsd(a, b),
        "n_a": a.n_journeys,
        "n_b": b.n_journeys,
        "conv_a": conv_a,
        "conv_b": conv_b,
        "sample_size": min(a.n_journeys, b.n_journeys),
        "z": z,
        "p_value": p,
        "effect": conv_a - conv_b,
        "population_reach": _ratio(a.n_actors, a.n_actors + b.n_actors),
        "other_snapshot_id": b.snapshot_id,
    }


def _entity_reach(snap: GraphSnapshot, entity: str) -> tuple[int, int]:
    """(journeys, actors) touching a state or outcome entity."""
    kind, ident = entity.split(":", 1)
    if kind == "outcome":
        return snap.outcome_counts.get(ident, 0), snap.outcome_actors.get(ident, 0)
    st = snap.state_stats.get(ident)
    return (st.reached, st.actors) if st else (0, 0)


def reach_difference_evidence(a: GraphSnapshot, b: GraphSnapshot, entity: str, cfg: DetectorConfig) -> dict[str, Any]:
    ka, act_a = _entity_reach(a, entity)
    kb, act_b = _entity_reach(b, entity)
    z, p = _test(ka, a.n_journeys, kb, b.n_journeys, cfg.n_min)
    ra, rb = ka / a.n_journeys, kb / b.n_journeys
    return {
        "kind": "reach_difference",
        "entity": entity,
        "segment_a": a.segment_id,
        "segment_b": b.segment_id,
        "reach_a": ra,
        "reach_b": rb,
        "delta": ra - rb,
        "sample_size": min(a.n_journeys, b.n_journeys),
        "z": z,
        "p_value": p,
        "effect": ra - rb,
        "population_reach": _ratio(act_a + act_b, a.n_actors + b.n_actors),
        "other_snapshot_id": b.snapshot_id,
    }


# -- loops -------------------------------------------------------------------


def loop_evidence(snap: GraphSnapshot, state: str, cfg: DetectorConfig) -> dict[str, Any]:
    st = snap.state_stats[state]
    mean = st.visits / st.reached
    if st.reached > 1:
        var = max(0.0, (st.visits_sq - st.reached * mean * mean) / (st.reached - 1))
    else:
        var = 0.0
    se = math.sqrt(var / st.reached)
    if se == 0:
        z = Z_CAP if mean > 1 else 0.0
    else:
        z = clamp_z((mean - 1.0) / se)
    back_from, back_count = "", 0
    if st.back_edges:
        back_from, back_count = min(st.back_edges.items(), key=lambda kv: (-kv[1], kv[0]))
    return {
        "kind": "repeated_visit",
        "state": state,
        "mean_visits": mean,
        "affected_fraction": st.multi_visit / snap.n_journeys,
        "back_edge_from": back_from,
        "back_edge_count": back_count,
        "tau_loop": cfg.tau_loop,
        "sample_size": st.reached,
        "z": z,
        "p_value": two_sided_p(z),
        "effect": mean - 1.0,
        "population_reach": _ratio(st.loop_actors, snap.n_actors),
    }


# -- path quality ------------------------------------------------------------


def path_quality_score(conversion_rate: float, duration: float, length: float, factors: str = "both") -> float:
    """Conversion rate times inverse duration times inverse length."""
    q = conversion_rate
    if factors in ("both", "duration"):
        q /= duration
    if factors in ("both", "length"):
        q /= length
    return q


def path_table(snap: GraphSnapshot, cfg: DetectorConfig) -> list[dict[str, Any]]:
    """Quality of every materialized path, with duration and length divided by deployment medians."""
    paths = list(snap.top_paths)
    if not paths:
        return []
    med_dur = statistics.median(max(p.mean_duration, 1.0) for p in paths)
    med_len = statistics.median(p.length for p in paths)
    rows = []
    for p in paths:
        floored = p.mean_duration < 1.0
        nd = max(p.mean_duration, 1.0) / med_dur
        nl = p.length / med_len
        rows.append({
            "path": p,
            "normalized_duration": nd,
            "normalized_length": nl,
            "duration_floored": int(floored),
            "quality": path_quality_score(p.conversion_rate, nd, nl, cfg.path_quality_factors),
        })
    return rows


def _sequence_counts(snap: GraphSnapshot, path: PathStat, target: str) -> tuple[int, int]:
    total = conv = 0
    for p in snap.top_paths:
        if p.states == path.states:
            total += p.occurrence
            if p.outcome == target:
                conv += p.occurrence
    return conv, total


def path_evidence(snap: GraphSnapshot, path_key: str, kind: str, cfg: DetectorConfig) -> dict[str, Any]:
    rows = path_table(snap, cfg)
    best = max(r["quality"] for r in rows)
    row = next(r for r in rows if r["path"].key == path_key)
    p: PathStat = row["path"]
    target = cfg.target_outcome
    conv, total = _sequence_counts(snap, p, target)
    overall_conv = snap.outcome_counts.get(target, 0)
    z, pv = _test(conv, total, overall_conv - conv, snap.n_journeys - total, cfg.n_min)
    rel = row["quality"] / best if best > 0 else 0.0
    return {
        "kind": kind,
        "path": p.key,
        "outcome": p.outcome,
        "conversion_rate": p.conversion_rate,
        "mean_duration_ms": p.mean_duration,
        "length": p.length,
        "occurrence": p.occurrence,
        "normalized_duration": row["normalized_duration"],
        "normalized_length": row["normalized_length"],
        "duration_floored": row["duration_floored"],
        "quality": row["quality"],
        "relative_quality": rel,
        "sample_size": total,
        "z": z,
        "p_value": pv,
        "effect": p.conversion_rate - _ratio(overall_conv, snap.n_journeys),
        "population_reach": _ratio(p.actors, snap.n_actors),
    }


# -- audit dispatch ----------------------------------------------------------


def recompute_evidence(
    ev: Mapping[str, Any],
    snapshot: GraphSnapshot,
    snapshots: Mapping[str, GraphSnapshot],
    cfg: DetectorConfig,
    releases: Releases = (),
) -> dict[str, Any]:
    """Rebuild an evidence payload from its provenance snapshot(s)."""
    kind = ev["kind"]
    if kind == "activation_driver":
        return activation_evidence(snapshot, ev["state"], cfg)
    if kind == "dropoff_point":
        return dropoff_evidence(snapshot, [ev["state"]], cfg)
    if kind == "dropoff_cluster":
        return dropoff_evidence(snapshot, ev["members"].split(","), cfg)
    if kind == "exit_probability":
        return exit_support_evidence(snapshot, ev["state"], ev["outcome"])
    if kind == "transition":
        return transition_evidence(snapshot, ev["src"], ev["dst"])
    if kind == "regression":
        prev = snapshots[ev["baseline_snapshot_id"]]
        return regression_evidence(prev, snapshot, (ev["src"], ev["dst"]), releases, cfg)
    if kind == "segment_divergence":
        return divergence_evidence(snapshot, snapshots[ev["other_snapshot_id"]], cfg)
    if kind == "reach_difference":
        return reach_difference_evidence(snapshot, snapshots[ev["other_snapshot_id"]], ev["entity"], cfg)
    if kind == "repeated_visit":
        return loop_evidence(snapshot, ev["state"], cfg)
    if kind in ("fast_path", "optimization_target"):
        return path_evidence(snapshot, ev["path"], kind, cfg)
    raise ValueError(f"unknown evidence kind {kind!r}")
