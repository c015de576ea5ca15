"""Seeded trajectory simulator for absorbing chains.

Randomness comes from numpy's PCG64 bit generator. For a fixed seed and
build the emitted bytes are identical; across numpy versions only the
statistics are promised.
"""

from __future__ import annotations

import bisect
import math
from collections import Counter
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from bip.canonical import canonical_json, atomic_write_text
from bip.domain import format_duration, format_timestamp, parse_duration, parse_timestamp
from bip.errors import InvalidChain
from bip.markov import AbsorbingChain

ROW_TOL = 1e-9
_BLOCK = 1 << 16


@dataclass(frozen=True)
class ChainSpec:
    transient: tuple[str, ...]
    absorbing: tuple[str, ...]
    transitions: Mapping[str, Mapping[str, float]]
    start: str
    gap: int = parse_duration("5m")
    jitter: float = 0.5
    seed: int = 0
    start_time: int = parse_timestamp("2024-01-01T00:00:00Z")
    spread: int = parse_duration("21d")
    platforms: Mapping[str, float] = field(default_factory=lambda: {"web": 0.7, "mobile": 0.3})

    def __post_init__(self) -> None:
        names = set(self.transient) | set(self.absorbing)
        if len(names) != len(self.transient) + len(self.absorbing):
            raise InvalidChain("state names must be unique across transient and absorbing states")
        if self.start not in self.transient:
            raise InvalidChain(f"start state {self.start!r} is not transient")
        for src in self.transient:
            row = self.transitions.get(src, {})
            if any(dst not in names for dst in row):
                raise InvalidChain(f"row {src!r} targets an unknown state")
            if any(p < 0 for p in row.values()):
                raise InvalidChain(f"row {src!r} has a negative probability")
            total = math.fsum(row.values())
            if abs(total - 1.0) > ROW_TOL:
                raise InvalidChain(f"row {src!r} sums to {total!r}, not 1")
        if set(self.transitions) - set(self.transient):
            raise InvalidChain("transitions given for a non-transient state")
        if not 0 <= self.jitter < 1:
            raise InvalidChain("jitter must lie in [0, 1)")
        if self.gap <= 0 or self.spread < 0:
            raise InvalidChain("gap must be positive and spread non-negative")
        if self.platforms and abs(math.fsum(self.platforms.values()) - 1.0) > ROW_TOL:
            raise InvalidChain("platform shares must sum to 1")

    def chain(self) -> AbsorbingChain:
        n, m = len(self.transient), len(self.absorbing)
        Q, R = np.zeros((n, n)), np.zeros((n, m))
        for i, src in enumerate(self.transient):
            for dst, p in self.transitions.get(src, {}).items():
                if dst in self.transient:
                    Q[i, self.transient.index(dst)] = p
                else:
                    R[i, self.absorbing.index(dst)] = p
        return AbsorbingChain(self.transient, self.absorbing, Q, R)

    def to_dict(self) -> dict[str, Any]:
        return {
            "transient": list(self.transient),
            "absorbing": list(self.absorbing),
            "transitions": {s: dict(r) for s, r in self.transitions.items()},
            "start": self.start,
            "gap": format_duration(self.gap),
            "jitter": self.jitter,
            "seed": self.seed,
            "start_time": format_timestamp(self.start_time),
            "spread": format_duration(self.spread),
            "platforms": dict(self.platforms),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ChainSpec:
        base = cls.__dataclass_fields__
        try:
            return cls(
                transient=tuple(d["transient"]),
                absorbing=tuple(d["absorbing"]),
                transitions={s: {k: float(v) for k, v in r.items()} for s, r in d["transitions"].items()},
                start=d["start"],
                gap=parse_duration(d.get("gap", "5m")),
                jitter=float(d.get("jitter", 0.5)),
                seed=int(d.get("seed", 0)),
                start_time=parse_timestamp(d["start_time"]) if "start_time" in d else base["start_time"].default,
                spread=parse_duration(d.get("spread", "21d")),
                platforms=dict(d.get("platforms", {"web": 0.7, "mobile": 0.3})),
            )
        except (AttributeError, KeyError, TypeError, ValueError) as exc:
            raise InvalidChain(f"invalid chain spec: {exc}") from exc


def load_chain_spec(path: str | Path) -> ChainSpec:
    import json

    return ChainSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def example_funnel_spec() -> ChainSpec:
    import json

    text = resources.files("bip").joinpath("data", "example_funnel.json").read_text(encoding="utf-8")
    return ChainSpec.from_dict(json.loads(text))


class _Uniforms:
    """Buffered uniform draws: one numpy call per block instead of per step."""

    def __init__(self, rng: np.random.Generator):
        self._rng = rng
        self._buf: list[float] = []
        self._i = 0

    def next(self) -> float:
        if self._i >= len(self._buf):
            self._buf = self._rng.random(_BLOCK).tolist()
            self._i = 0
        u = self._buf[self._i]
        self._i += 1
        return u


@dataclass(frozen=True)
class Trajectory:
    states: tuple[str, ...]
    outcome: str


def _tables(spec: ChainSpec) -> dict[str, tuple[list[float], list[str]]]:
    out = {}
    for src in spec.transient:
        row = sorted(spec.transitions.get(src, {}).items())
        cum, targets, acc = [], [], 0.0
        for dst, p in row:
            if p > 0:
                acc += p
                cum.append(acc)
                targets.append(dst)
        cum[-1] = 1.0
        out[src] = (cum, targets)
    return out


def sample_trajectories(spec: ChainSpec, n: int, seed: int | None = None) -> Iterator[Trajectory]:
    """*n* independent absorbed paths from the start state."""
    if n < 1:
        raise ValueError("n must be >= 1")
    draws = _Uniforms(np.random.Generator(np.random.PCG64(spec.seed if seed is None else seed)))
    tables = _tables(spec)
    absorbing = set(spec.absorbing)
    for _ in range(n):
        state, path = spec.start, [spec.start]
        while True:
            cum, targets = tables[state]
            state = targets[bisect.bisect_right(cum, draws.next())] if len(targets) > 1 else targets[0]
            if state in absorbing:
                break
            path.append(state)
        yield Trajectory(tuple(path), state)


@dataclass(frozen=True)
class TrajectorySummary:
    n: int
    reached: Mapping[str, int]
    converted_given_reached: Mapping[str, int]
    outcomes: Mapping[str, int]
    target: str

    def reach(self, state: str) -> float:
        return self.reached.get(state, 0) / self.n

    def p_given_reached(self, state: str) -> float:
        k = self.reached.get(state, 0)
        return self.converted_given_reached.get(state, 0) / k if k else float("nan")

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "target": self.target,
            "outcomes": dict(sorted(self.outcomes.items())),
            "reach": {s: self.reach(s) for s in sorted(self.reached)},
            "p_target_given_reached": {s: self.p_given_reached(s) for s in sorted(self.reached)},
        }


def summarize(trajectories: Sequence[Trajectory] | Iterator[Trajectory], target: str = "converted") -> TrajectorySummary:
    reached: Counter = Counter()
    conv: Counter = Counter()
    outcomes: Counter = Counter()
    n = 0
    for t in trajectories:
        n += 1
        outcomes[t.outcome] += 1
        hit = t.outcome == target
        for s in set(t.states):
            reached[s] += 1
            conv[s] += hit
    return TrajectorySummary(n, dict(reached), dict(conv), dict(outcomes), target)


def simulate_events(
    spec: ChainSpec,
    n: int,
    seed: int | None = None,
    actor_prefix: str = "u",
    start_time: int | None = None,
    target: str = "converted",
) -> tuple[list[dict[str, Any]], TrajectorySummary]:
    """Event records for *n* journeys (one actor each) plus the trajectory summary.

    Each visit emits an event named after the state; the absorbing outcome
    emits a final event named after the outcome. Records are ordered by
    ``(timestamp, event_id)``.
    """
    seed = spec.seed if seed is None else seed
    t0 = spec.start_time if start_time is None else start_time
    timing = _Uniforms(np.random.Generator(np.random.PCG64([seed, 1])))
    platforms = sorted(spec.platforms.items())
    plat_cum = list(np.cumsum([p for _, p in platforms])) if platforms else []
    trajectories = list(sample_trajectories(spec, n, seed))
    width = max(7, len(str(n)))
    rows: list[tuple[int, str, dict[str, Any]]] = []
    for i, traj in enumerate(trajectories):
        actor = f"{actor_prefix}{i:0{width}d}"
        context: dict[str, Any] = {"user_agent": "Mozilla/5.0"}
        if platforms:
            j = min(bisect.bisect_right(plat_cum, timing.next()), len(platforms) - 1)
            context["platform"] = platforms[j][0]
        ts = t0 + int(timing.next() * spec.spread)
        for step, name in enumerate((*traj.states, traj.outcome)):
            if step:
                ts += max(1, int(round(spec.gap * (1 + spec.jitter * (2 * timing.next() - 1)))))
            eid = f"{actor}-{step:03d}"
            rows.append((ts, eid, {
                "event_id": eid,
                "actor_id": actor,
                "event_name": name,
                "timestamp": format_timestamp(ts),
                "properties": {},
                "context": context,
            }))
    rows.sort(key=lambda r: (r[0], r[1]))
    return [r[2] for r in rows], summarize(trajectories, target)


def write_events(path: str | Path, records: Sequence[Mapping[str, Any]]) -> None:
    atomic_write_text(path, "".join(canonical_json(r) + "\n" for r in records))
