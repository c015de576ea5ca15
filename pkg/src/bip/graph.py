"""Journey extraction and immutable journey-graph snapshots.

A snapshot carries the transition counts, the estimated ``Q``/``R`` blocks
of the absorbing chain, per-journey reach rates, materialized paths and the
per-state sufficient statistics that detectors and the audit recompute from.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from bip.canonical import SCHEMA_VERSION, content_hash
from bip.domain import (
    ALL_SEGMENT,
    JourneyDefinition,
    SegmentDefinition,
    TimeWindow,
    evaluate_segment,
    format_timestamp,
)
from bip.errors import EmptySnapshot
from bip.nsd import DerivedStateEvent

CENSORED = "censored"
EDGE_SEP = "->"


@dataclass(slots=True)
class JourneyInstance:
    canonical_actor_id: str
    visits: list[tuple[str, int]]
    outcome: str
    window_id: str
    end_timestamp: int
    sessions: int = 1
    # (previous state, re-entered state) for every re-entry into an already visited state
    back_edges: list[tuple[str, str]] = field(default_factory=list)

    @property
    def states(self) -> list[str]:
        return [s for s, _ in self.visits]

    @property
    def start_timestamp(self) -> int:
        return self.visits[0][1]

    @property
    def duration(self) -> int:
        return self.end_timestamp - self.visits[0][1]

    def visit_counts(self) -> Counter:
        return Counter(s for s, _ in self.visits)


def _window_id(window: TimeWindow) -> str:
    return f"{format_timestamp(window.start)}/{format_timestamp(window.end)}"


def extract_journeys(
    derived: Iterable[DerivedStateEvent], jdef: JourneyDefinition, window: TimeWindow
) -> list[JourneyInstance]:
    """Cut each actor's state stream inside *window* into journey instances.

    A journey opens at a start state and closes at the first terminal-mapped
    state, after ``inactivity_timeout`` of silence (``timeout_outcome``), or is
    censored at the window end. Consecutive identical states collapse.
    """
    per_actor: dict[str, list[DerivedStateEvent]] = defaultdict(list)
    levels = set(jdef.levels)
    for d in derived:
        if d.level.value in levels and window.contains(d.timestamp):
            per_actor[d.canonical_actor_id].append(d)

    wid = _window_id(window)
    journeys: list[JourneyInstance] = []
    for actor in sorted(per_actor):
        stream = sorted(per_actor[actor], key=lambda d: (d.timestamp, d.source_event_id))
        journeys.extend(_cut_actor(actor, stream, jdef, window, wid))
    return journeys


def _cut_actor(actor, stream, jdef, window, wid):
    timeout = jdef.inactivity_timeout
    out = []
    cur: JourneyInstance | None = None
    seen: set[str] = set()
    last_ts = 0
    i = 0
    while i < len(stream):
        ev = stream[i]
        if cur is None:
            if ev.state_id in jdef.start_states:
                cur = JourneyInstance(actor, [(ev.state_id, ev.timestamp)], CENSORED, wid, ev.timestamp)
                seen = {ev.state_id}
                last_ts = ev.timestamp
            i += 1
            continue
        if ev.timestamp - last_ts >= timeout:
            cur.outcome = jdef.timeout_outcome.value
            cur.end_timestamp = last_ts
            out.append(cur)
            cur = None
            continue  # reprocess this event as a potential new start
        if ev.timestamp - last_ts > jdef.session_gap:
            cur.sessions += 1
        terminal = jdef.terminal_map.get(ev.state_id)
        if terminal is not None:
            cur.outcome = terminal.value
            cur.end_timestamp = ev.timestamp
            out.append(cur)
            cur = None
        elif ev.state_id != cur.visits[-1][0]:
            if ev.state_id in seen:
                cur.back_edges.append((cur.visits[-1][0], ev.state_id))
            seen.add(ev.state_id)
            cur.visits.append((ev.state_id, ev.timestamp))
            cur.end_timestamp = ev.timestamp
        last_ts = ev.timestamp
        i += 1
    if cur is not None:
        if window.end - last_ts >= timeout:
            cur.outcome = jdef.timeout_outcome.value
        cur.end_timestamp = last_ts
        out.append(cur)
    return out


# -- aggregates ------------------------------------------------------------


def reach_rates(journeys: Sequence[JourneyInstance], states: Iterable[str] | None = None) -> dict[str, float]:
    """Fraction of journeys visiting each state at least once."""
    n = len(journeys)
    if n == 0:
        raise EmptySnapshot("reach rate needs at least one journey")
    counts: Counter = Counter()
    for j in journeys:
        counts.update(set(j.states))
    keys = set(counts) if states is None else set(states)
    return {s: counts.get(s, 0) / n for s in sorted(keys)}


@dataclass(frozen=True)
class PathStat:
    states: tuple[str, ...]
    outcome: str
    occurrence: int
    conversion_rate: float
    mean_duration: float
    length: int
    actors: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "states": list(self.states),
            "outcome": self.outcome,
            "occurrence": self.occurrence,
            "conversion_rate": self.conversion_rate,
            "mean_duration_ms": self.mean_duration,
            "length": self.length,
            "actors": self.actors,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PathStat:
        return cls(tuple(d["states"]), d["outcome"], d["occurrence"], d["conversion_rate"],
                   d["mean_duration_ms"], d["length"], d["actors"])

    @property
    def key(self) -> str:
        return ">".join(self.states) + "|" + self.outcome


def materialize_paths(
    journeys: Sequence[JourneyInstance], top_n: int = 20, target_outcome: str = "converted"
) -> list[PathStat]:
    """Group journeys by (transient sequence, outcome) and rank the groups.

    ``conversion_rate`` is the share of journeys with the same transient
    sequence that reached *target_outcome*, so every outcome variant of a
    sequence carries the sequence's conversion efficiency.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    groups: dict[tuple[tuple[str, ...], str], list[JourneyInstance]] = defaultdict(list)
    seq_total: Counter = Counter()
    seq_conv: Counter = Counter()
    for j in journeys:
        seq = tuple(j.states)
        groups[(seq, j.outcome)].append(j)
        seq_total[seq] += 1
        if j.outcome == target_outcome:
            seq_conv[seq] += 1
    stats = []
    for (seq, outcome), members in groups.items():
        stats.append(PathStat(
            states=seq,
            outcome=outcome,
            occurrence=len(members),
            conversion_rate=seq_conv[seq] / seq_total[seq],
            mean_duration=math.fsum(m.duration for m in members) / len(members),
            length=len(seq),
            actors=len({m.canonical_actor_id for m in members}),
        ))
    stats.sort(key=lambda p: (-p.occurrence, -p.conversion_rate, p.states, p.outcome))
    return stats[:top_n]


@dataclass(frozen=True)
class StateStats:
    reached: int
    reached_by_outcome: Mapping[str, int]
    visits: int
    visits_sq: int
    multi_visit: int
    starts: int
    actors: int
    loop_actors: int
    back_edges: Mapping[str, int]

    def to_dict(self) -> dict[str, Any]:
        return {
            "reached": self.reached,
            "reached_by_outcome": dict(sorted(self.reached_by_outcome.items())),
            "visits": self.visits,
            "visits_sq": self.visits_sq,
            "multi_visit": self.multi_visit,
            "starts": self.starts,
            "actors": self.actors,
            "loop_actors": self.loop_actors,
            "back_edges": dict(sorted(self.back_edges.items())),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> StateStats:
        return cls(**d)


def state_statistics(journeys: Sequence[JourneyInstance], states: Iterable[str]) -> dict[str, StateStats]:
    reached: Counter = Counter()
    by_outcome: dict[str, Counter] = defaultdict(Counter)
    visits: Counter = Counter()
    visits_sq: Counter = Counter()
    multi: Counter = Counter()
    starts: Counter = Counter()
    actors: dict[str, set] = defaultdict(set)
    loop_actors: dict[str, set] = defaultdict(set)
    back: dict[str, Counter] = defaultdict(Counter)
    for j in journeys:
        counts = j.visit_counts()
        starts[j.visits[0][0]] += 1
        for s, c in counts.items():
            reached[s] += 1
            by_outcome[s][j.outcome] += 1
            visits[s] += c
            visits_sq[s] += c * c
            actors[s].add(j.canonical_actor_id)
            if c > 1:
                multi[s] += 1
                loop_actors[s].add(j.canonical_actor_id)
        for prev, s in j.back_edges:
            back[s][prev] += 1
    return {
        s: StateStats(reached[s], dict(by_outcome[s]), visits[s], visits_sq[s], multi[s], starts[s],
                      len(actors[s]), len(loop_actors[s]), dict(back[s]))
        for s in states
    }


# -- snapshots -------------------------------------------------------------


def edge_key(src: str, dst: str) -> str:
    return f"{src}{EDGE_SEP}{dst}"


def split_edge(key: str) -> tuple[str, str]:
    src, dst = key.split(EDGE_SEP, 1)
    return src, dst


@dataclass(frozen=True)
class GraphSnapshot:
    snapshot_id: str
    window: TimeWindow
    journey_id: str
    segment_id: str
    states: tuple[str, ...]
    absorbing: tuple[str, ...]
    edge_counts: Mapping[str, int]
    Q: np.ndarray
    R: np.ndarray
    reach: Mapping[str, float]
    n_journeys: int
    n_actors: int
    outcome_counts: Mapping[str, int]
    outcome_actors: Mapping[str, int]
    state_stats: Mapping[str, StateStats]
    edge_actors: Mapping[str, int]
    top_paths: tuple[PathStat, ...]
    created_at: int

    def __post_init__(self) -> None:
        self.Q.setflags(write=False)
        self.R.setflags(write=False)

    def index(self, state: str) -> int:
        return self.states.index(state)

    def out_count(self, state: str) -> int:
        return sum(c for k, c in self.edge_counts.items() if split_edge(k)[0] == state)

    def start_distribution(self) -> dict[str, float]:
        total = sum(st.starts for st in self.state_stats.values())
        return {s: st.starts / total for s, st in self.state_stats.items() if st.starts}

    def outgoing(self, state: str) -> dict[str, float]:
        """Empirical next-state distribution of *state* over transient and absorbing targets."""
        if state not in self.states:
            return {}
        i = self.index(state)
        dist = {s: float(self.Q[i, j]) for j, s in enumerate(self.states) if self.Q[i, j] > 0}
        dist.update({a: float(self.R[i, k]) for k, a in enumerate(self.absorbing) if self.R[i, k] > 0})
        return dist

    def content(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "window": self.window.to_dict(),
            "journey_id": self.journey_id,
            "segment_id": self.segment_id,
            "states": list(self.states),
            "absorbing": list(self.absorbing),
            "edge_counts": dict(sorted(self.edge_counts.items())),
            "Q": self.Q.tolist(),
            "R": self.R.tolist(),
            "reach": dict(self.reach),
            "n_journeys": self.n_journeys,
            "n_actors": self.n_actors,
            "outcome_counts": dict(sorted(self.outcome_counts.items())),
            "outcome_actors": dict(sorted(self.outcome_actors.items())),
            "state_stats": {s: st.to_dict() for s, st in self.state_stats.items()},
            "edge_actors": dict(sorted(self.edge_actors.items())),
            "top_paths": [p.to_dict() for p in self.top_paths],
            "created_at": format_timestamp(self.created_at),
        }

    def to_dict(self) -> dict[str, Any]:
        return {"snapshot_id": self.snapshot_id, **self.content()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> GraphSnapshot:
        from bip.domain import parse_timestamp

        n, m = len(d["states"]), len(d["absorbing"])
        return cls(
            snapshot_id=d["snapshot_id"],
            window=TimeWindow.from_dict(d["window"]),
            journey_id=d["journey_id"],
            segment_id=d["segment_id"],
            states=tuple(d["states"]),
            absorbing=tuple(d["absorbing"]),
            edge_counts=dict(d["edge_counts"]),
            Q=np.array(d["Q"], dtype=float).reshape(n, n),
            R=np.array(d["R"], dtype=float).reshape(n, m),
            reach=dict(d["reach"]),
            n_journeys=d["n_journeys"],
            n_actors=d["n_actors"],
            outcome_counts=dict(d["outcome_counts"]),
            outcome_actors=dict(d["outcome_actors"]),
            state_stats={s: StateStats.from_dict(v) for s, v in d["state_stats"].items()},
            edge_actors=dict(d["edge_actors"]),
            top_paths=tuple(PathStat.from_dict(p) for p in d["top_paths"]),
            created_at=parse_timestamp(d["created_at"]),
        )

    def recomputed_id(self) -> str:
        return content_hash(self.content(), prefix="snap-")


def build_snapshot(
    journeys: Sequence[JourneyInstance],
    jdef: JourneyDefinition,
    window: TimeWindow,
    segment: SegmentDefinition | None = None,
    actor_props: Mapping[str, Mapping[str, Any]] | None = None,
    top_n: int = 20,
    target_outcome: str = "converted",
) -> GraphSnapshot:
    """Aggregate journeys into a snapshot, estimating Q and R from transition counts.

    Censored journeys contribute transient transitions but no absorbing one.
    """
    segment = segment or ALL_SEGMENT
    if segment.conditions:
        props = actor_props or {}
        journeys = [j for j in journeys if evaluate_segment(segment, props.get(j.canonical_actor_id, {}))]
    if not journeys:
        raise EmptySnapshot(f"no journeys for {jdef.journey_id!r} / {segment.segment_id!r} in window")

    counts: Counter = Counter()
    edge_actor_sets: dict[str, set] = defaultdict(set)
    outcome_actor_sets: dict[str, set] = defaultdict(set)
    for j in journeys:
        seq = j.states
        for a, b in zip(seq, seq[1:]):
            key = edge_key(a, b)
            counts[key] += 1
            edge_actor_sets[key].add(j.canonical_actor_id)
        if j.outcome != CENSORED:
            key = edge_key(seq[-1], j.outcome)
            counts[key] += 1
            edge_actor_sets[key].add(j.canonical_actor_id)
        outcome_actor_sets[j.outcome].add(j.canonical_actor_id)

    n = len(journeys)
    visited: Counter = Counter()
    for j in journeys:
        visited.update(set(j.states))
    reach_all = {s: c / n for s, c in visited.items()}
    states = tuple(sorted(reach_all, key=lambda s: (-visited[s], s)))
    absorbing = tuple(o.value for o in jdef.absorbing)
    s_idx = {s: i for i, s in enumerate(states)}
    a_idx = {a: i for i, a in enumerate(absorbing)}

    Q = np.zeros((len(states), len(states)))
    R = np.zeros((len(states), len(absorbing)))
    out_tot: Counter = Counter()
    for key, c in counts.items():
        out_tot[split_edge(key)[0]] += c
    for key, c in sorted(counts.items()):
        src, dst = split_edge(key)
        if dst in s_idx:
            Q[s_idx[src], s_idx[dst]] = c / out_tot[src]
        else:
            R[s_idx[src], a_idx[dst]] = c / out_tot[src]

    outcome_counts = Counter(j.outcome for j in journeys)
    stats = state_statistics(journeys, states)
    snap_fields = dict(
        window=window,
        journey_id=jdef.journey_id,
        segment_id=segment.segment_id,
        states=states,
        absorbing=absorbing,
        edge_counts=dict(sorted(counts.items())),
        Q=Q,
        R=R,
        reach={s: reach_all[s] for s in states},
        n_journeys=n,
        n_actors=len({j.canonical_actor_id for j in journeys}),
        outcome_counts=dict(sorted(outcome_counts.items())),
        outcome_actors={o: len(a) for o, a in sorted(outcome_actor_sets.items())},
        state_stats=stats,
        edge_actors={k: len(v) for k, v in sorted(edge_actor_sets.items())},
        top_paths=tuple(materialize_paths(journeys, top_n, target_outcome)),
        created_at=window.end,
    )
    draft = GraphSnapshot(snapshot_id="", **snap_fields)
    return GraphSnapshot(snapshot_id=draft.recomputed_id(), **snap_fields)
