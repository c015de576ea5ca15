"""Event normalization and three-level state derivation.

Stages run in this order over a batch: :func:`normalize_stream` (parse,
late-arrival quarantine, sort) -> :func:`deduplicate` -> :func:`filter_bots`
-> :func:`resolve_identities` -> :func:`derive_semantic_states` and
:func:`derive_lifecycle_states`.
"""

from __future__ import annotations

import fnmatch
import logging
from collections import defaultdict, deque
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from bip.domain import (
    Condition,
    RawEvent,
    Scalar,
    check_scalar_map,
    conditions_hold,
    format_duration,
    format_timestamp,
    parse_duration,
    parse_timestamp,
)
from bip.errors import ConfigError

log = logging.getLogger(__name__)


class Level(str, Enum):
    RAW_EVENT = "raw_event"
    SEMANTIC = "semantic"
    LIFECYCLE = "lifecycle"


LEVEL_RANK = {Level.RAW_EVENT: 0, Level.SEMANTIC: 1, Level.LIFECYCLE: 2}
LIFECYCLE_STATES = ("new_user", "activated", "paying", "churned", "retained")


@dataclass(frozen=True, slots=True)
class NormalizedEvent:
    event_id: str
    actor_id: str
    event_name: str
    timestamp: int
    properties: Mapping[str, Scalar]
    context: Mapping[str, Scalar]
    canonical_actor_id: str
    ingestion_lag: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "actor_id": self.actor_id,
            "event_name": self.event_name,
            "timestamp": format_timestamp(self.timestamp),
            "properties": dict(self.properties),
            "context": dict(self.context),
            "canonical_actor_id": self.canonical_actor_id,
            "ingestion_lag_ms": self.ingestion_lag,
        }

    def as_raw(self) -> RawEvent:
        return RawEvent(self.event_id, self.canonical_actor_id, self.event_name, self.timestamp,
                        self.properties, self.context)


@dataclass(frozen=True, slots=True)
class DerivedStateEvent:
    canonical_actor_id: str
    state_id: str
    level: Level
    timestamp: int
    source_event_id: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "canonical_actor_id": self.canonical_actor_id,
            "state_id": self.state_id,
            "level": self.level.value,
            "timestamp": format_timestamp(self.timestamp),
            "source_event_id": self.source_event_id,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> DerivedStateEvent:
        return cls(d["canonical_actor_id"], d["state_id"], Level(d["level"]),
                   parse_timestamp(d["timestamp"]), d["source_event_id"])


@dataclass(frozen=True, slots=True)
class Rejected:
    """An event routed away from the main stream, with the reason."""

    record: Mapping[str, Any]
    reason: str

    def to_dict(self) -> dict[str, Any]:
        return {"reason": self.reason, "record": dict(self.record)}


# -- rule sets -----------------------------------------------------------


@dataclass(frozen=True)
class SemanticRule:
    rule_id: str
    state_id: str
    event_name_matcher: str
    conditions: tuple[Condition, ...] = ()

    @property
    def is_wildcard(self) -> bool:
        return any(ch in self.event_name_matcher for ch in "*?[")

    def matches_name(self, event_name: str) -> bool:
        if self.is_wildcard:
            return fnmatch.fnmatchcase(event_name, self.event_name_matcher)
        return event_name == self.event_name_matcher

    def to_dict(self) -> dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "state_id": self.state_id,
            "event_name": self.event_name_matcher,
            "conditions": [c.to_dict() for c in self.conditions],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SemanticRule:
        return cls(d["rule_id"], d["state_id"], d["event_name"],
                   tuple(Condition.from_dict(c) for c in d.get("conditions", ())))


@dataclass(frozen=True)
class StateRuleSet:
    rules: tuple[SemanticRule, ...] = ()
    fallback_mode: str = "raw_event"

    def __post_init__(self) -> None:
        ids = [r.rule_id for r in self.rules]
        if len(ids) != len(set(ids)):
            raise ConfigError("semantic rule ids must be unique")
        if any(not r.state_id for r in self.rules):
            raise ConfigError("semantic rule state ids must be non-empty")
        if self.fallback_mode not in ("raw_event", "drop"):
            raise ConfigError("fallback_mode must be raw_event or drop")

    @property
    def state_ids(self) -> set[str]:
        return {r.state_id for r in self.rules}

    def to_dict(self) -> dict[str, Any]:
        return {"fallback_mode": self.fallback_mode, "rules": [r.to_dict() for r in self.rules]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> StateRuleSet:
        return cls(tuple(SemanticRule.from_dict(r) for r in d.get("rules", ())),
                   d.get("fallback_mode", "raw_event"))


@dataclass(frozen=True)
class LifecycleRule:
    lifecycle_state: str
    trigger: str = "first_event"
    within: int | None = None
    absence_for: int | None = None

    def __post_init__(self) -> None:
        if self.lifecycle_state not in LIFECYCLE_STATES:
            raise ConfigError(f"unknown lifecycle state {self.lifecycle_state!r}")
        for name in ("within", "absence_for"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f"lifecycle {name} must be positive")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"lifecycle_state": self.lifecycle_state, "trigger": self.trigger}
        if self.within is not None:
            d["within"] = format_duration(self.within)
        if self.absence_for is not None:
            d["absence_for"] = format_duration(self.absence_for)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> LifecycleRule:
        within = d.get("within")
        absence = d.get("absence_for")
        return cls(d["lifecycle_state"], d.get("trigger", "first_event"),
                   parse_duration(within) if within is not None else None,
                   parse_duration(absence) if absence is not None else None)


@dataclass(frozen=True)
class LifecycleRuleSet:
    rules: tuple[LifecycleRule, ...] = ()

    def __post_init__(self) -> None:
        names = [r.lifecycle_state for r in self.rules]
        if len(names) != len(set(names)):
            raise ConfigError("each lifecycle state may be defined at most once")

    def to_dict(self) -> list[dict[str, Any]]:
        return [r.to_dict() for r in self.rules]

    @classmethod
    def from_list(cls, items: Iterable[Mapping[str, Any]]) -> LifecycleRuleSet:
        return cls(tuple(LifecycleRule.from_dict(d) for d in items))


@dataclass(frozen=True)
class BotRules:
    ua_substrings: tuple[str, ...] = ("HealthCheck", "bot", "spider", "crawler")
    max_rate: int = 300
    sustain: int = 2 * 60 * 1000

    def to_dict(self) -> dict[str, Any]:
        return {"ua_substrings": list(self.ua_substrings), "max_rate": self.max_rate,
                "sustain": format_duration(self.sustain)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> BotRules:
        return cls(tuple(d.get("ua_substrings", cls.ua_substrings)), int(d.get("max_rate", 300)),
                   parse_duration(d.get("sustain", "2m")))


# -- normalization -------------------------------------------------------


def raw_event_from_record(rec: Mapping[str, Any]) -> RawEvent:
    """Build a RawEvent from a decoded events.jsonl object. Raises ValueError."""
    event_id = rec.get("event_id")
    if not isinstance(event_id, str) or not event_id:
        raise ValueError("event_id missing or empty")
    actor_id = rec.get("actor_id")
    if not isinstance(actor_id, str) or not actor_id:
        raise ValueError("actor_id missing or empty")
    name = rec.get("event_name")
    if not isinstance(name, str) or not name:
        raise ValueError("event_name missing or empty")
    ts = rec.get("timestamp")
    ts_ms = ts if isinstance(ts, int) and not isinstance(ts, bool) else parse_timestamp(ts)
    return RawEvent(event_id, actor_id, name, ts_ms,
                    check_scalar_map(rec.get("properties"), "properties"),
                    check_scalar_map(rec.get("context"), "context"))


def normalize_stream(
    records: Iterable[Mapping[str, Any] | RawEvent], lag_tolerance: int, now: int
) -> tuple[list[RawEvent], list[Rejected]]:
    """Parse records to UTC-millisecond events and quarantine late or malformed ones.

    Accepted output is sorted by ``(timestamp, event_id)``.
    """
    accepted: list[RawEvent] = []
    quarantined: list[Rejected] = []
    for rec in records:
        if isinstance(rec, RawEvent):
            ev = rec
        else:
            try:
                ev = raw_event_from_record(rec)
            except ValueError as exc:
                reason = "unparseable_timestamp" if "timestamp" in str(exc) else "invalid_event"
                quarantined.append(Rejected(dict(rec), f"{reason}: {exc}"))
                continue
        if now - ev.timestamp > lag_tolerance:
            quarantined.append(Rejected(ev.to_dict(), "late"))
            continue
        accepted.append(ev)
    accepted.sort(key=lambda e: (e.timestamp, e.event_id))
    return accepted, quarantined


def deduplicate(events: Iterable[RawEvent], idempotency_window: int) -> list[RawEvent]:
    """Drop repeats of an event_id within *idempotency_window* of its first kept copy."""
    first_kept: dict[str, int] = {}
    out = []
    for ev in events:
        seen = first_kept.get(ev.event_id)
        if seen is not None and ev.timestamp - seen <= idempotency_window:
            continue
        first_kept[ev.event_id] = ev.timestamp
        out.append(ev)
    return out


def filter_bots(events: Sequence[RawEvent], rules: BotRules) -> tuple[list[RawEvent], list[Rejected]]:
    """User-Agent substring match, then a sustained sliding one-minute rate heuristic."""
    dropped: list[Rejected] = []
    survivors: list[RawEvent] = []
    needles = [s.lower() for s in rules.ua_substrings if s]
    for ev in events:
        ua = ev.user_agent.lower()
        if needles and any(n in ua for n in needles):
            dropped.append(Rejected(ev.to_dict(), "ua_match"))
        else:
            survivors.append(ev)

    bots: set[str] = set()
    windows: dict[str, deque[int]] = defaultdict(deque)
    streak_start: dict[str, int] = {}
    for ev in survivors:
        actor = ev.actor_id
        if actor in bots:
            continue
        win = windows[actor]
        win.append(ev.timestamp)
        while win[0] <= ev.timestamp - 60_000:
            win.popleft()
        if len(win) > rules.max_rate:
            start = streak_start.setdefault(actor, ev.timestamp)
            if ev.timestamp - start >= rules.sustain:
                bots.add(actor)
        else:
            streak_start.pop(actor, None)

    kept = []
    for ev in survivors:
        if ev.actor_id in bots:
            dropped.append(Rejected(ev.to_dict(), "rate_heuristic"))
        else:
            kept.append(ev)
    if bots:
        log.info("rate heuristic flagged %d actors", len(bots))
    return kept, dropped


@dataclass
class IdentityReport:
    components: int = 0
    aliased_ids: int = 0
    multi_user_components: list[list[str]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"components": self.components, "aliased_ids": self.aliased_ids,
                "multi_user_components": self.multi_user_components}


def resolve_identities(
    events: Sequence[RawEvent], alias_event_names: Iterable[str], now: int | None = None
) -> tuple[dict[str, str], list[NormalizedEvent], IdentityReport]:
    """Stitch anonymous and authenticated ids over alias events.

    Each connected component maps to its authenticated id with the earliest
    first-seen time, ties broken by the smallest id. Components with several
    authenticated ids are merged anyway and listed in the report.
    """
    alias_names = set(alias_event_names)
    parent: dict[str, str] = {}

    def find(x: str) -> str:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(a: str, b: str) -> None:
        for x in (a, b):
            parent.setdefault(x, x)
        ra, rb = find(a), find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            parent[rb] = ra

    first_seen: dict[str, int] = {}
    authenticated: set[str] = set()
    for ev in events:
        if ev.actor_id not in first_seen or ev.timestamp < first_seen[ev.actor_id]:
            first_seen[ev.actor_id] = ev.timestamp
        if ev.event_name not in alias_names:
            continue
        anon = ev.properties.get("anonymous_id")
        user = ev.properties.get("user_id")
        if not isinstance(anon, str) or not isinstance(user, str) or not anon or not user:
            continue
        authenticated.add(user)
        for x in (anon, user):
            if x not in first_seen or ev.timestamp < first_seen[x]:
                first_seen[x] = ev.timestamp
        union(anon, user)
        union(ev.actor_id, user)

    groups: dict[str, list[str]] = defaultdict(list)
    for x in sorted(parent):
        groups[find(x)].append(x)
    alias_map: dict[str, str] = {}
    report = IdentityReport(components=len(groups))
    for members in groups.values():
        users = [m for m in members if m in authenticated]
        canonical = min(users, key=lambda u: (first_seen.get(u, 0), u))
        if len(users) > 1:
            report.multi_user_components.append(sorted(users))
        for m in members:
            alias_map[m] = canonical
    report.aliased_ids = sum(1 for k, v in alias_map.items() if k != v)
    report.multi_user_components.sort()

    out = [
        NormalizedEvent(ev.event_id, ev.actor_id, ev.event_name, ev.timestamp, ev.properties, ev.context,
                        alias_map.get(ev.actor_id, ev.actor_id),
                        (now - ev.timestamp) if now is not None else 0)
        for ev in events
    ]
    return alias_map, out, report


# -- state derivation ----------------------------------------------------


def derive_semantic_states(events: Iterable[NormalizedEvent], rules: StateRuleSet) -> list[DerivedStateEvent]:
    """First matching rule wins; unmatched events fall back to their raw event name or are dropped."""
    by_name: dict[str, list[SemanticRule]] = {}
    out = []
    for ev in events:
        candidates = by_name.get(ev.event_name)
        if candidates is None:
            candidates = [r for r in rules.rules if r.matches_name(ev.event_name)]
            by_name[ev.event_name] = candidates
        for rule in candidates:
            if conditions_hold(rule.conditions, ev.properties):
                out.append(DerivedStateEvent(ev.canonical_actor_id, rule.state_id, Level.SEMANTIC,
                                             ev.timestamp, ev.event_id))
                break
        else:
            if rules.fallback_mode == "raw_event":
                out.append(DerivedStateEvent(ev.canonical_actor_id, ev.event_name, Level.RAW_EVENT,
                                             ev.timestamp, ev.event_id))
    return out


def derive_lifecycle_states(
    history: Sequence[DerivedStateEvent], rules: LifecycleRuleSet, as_of: int | None = None
) -> list[DerivedStateEvent]:
    """Fold one actor's time-ordered history into lifecycle milestone events.

    Each milestone is emitted once, at the instant it first becomes true.
    Absence milestones fire at ``last_event + absence_for`` when the gap is
    observed in the history or has elapsed by *as_of*.
    """
    history = [h for h in history if h.level is not Level.LIFECYCLE]
    if not history:
        return []
    actor = history[0].canonical_actor_id
    first = history[0]
    emitted: list[tuple[int, int, str, str]] = []
    order = {name: i for i, name in enumerate(LIFECYCLE_STATES)}

    for rule in rules.rules:
        trigger_ev = None
        if rule.trigger == "first_event":
            trigger_ev = first
        else:
            for h in history:
                if rule.trigger == "any_event" or h.state_id == rule.trigger:
                    trigger_ev = h
                    break
        if trigger_ev is None:
            continue
        if rule.within is not None and trigger_ev.timestamp - first.timestamp > rule.within:
            continue
        if rule.absence_for is None:
            emitted.append((trigger_ev.timestamp, order[rule.lifecycle_state], rule.lifecycle_state,
                            trigger_ev.source_event_id))
            continue
        after = [h for h in history if h.timestamp >= trigger_ev.timestamp]
        hit = None
        for prev, nxt in zip(after, after[1:]):
            if nxt.timestamp - prev.timestamp >= rule.absence_for:
                hit = prev
                break
        if hit is None:
            last = after[-1]
            if as_of is not None and as_of - last.timestamp >= rule.absence_for:
                hit = last
        if hit is not None:
            emitted.append((hit.timestamp + rule.absence_for, order[rule.lifecycle_state],
                            rule.lifecycle_state, hit.source_event_id))

    emitted.sort()
    return [DerivedStateEvent(actor, name, Level.LIFECYCLE, ts, src) for ts, _, name, src in emitted]


def derive_states(
    events: Sequence[NormalizedEvent],
    rules: StateRuleSet,
    lifecycle: LifecycleRuleSet | None = None,
    as_of: int | None = None,
) -> list[DerivedStateEvent]:
    """All three levels, sorted by (timestamp, actor, level, source event)."""
    derived = derive_semantic_states(events, rules)
    if lifecycle is not None and lifecycle.rules:
        per_actor: dict[str, list[DerivedStateEvent]] = defaultdict(list)
        for d in derived:
            per_actor[d.canonical_actor_id].append(d)
        life = []
        for actor in sorted(per_actor):
            life.extend(derive_lifecycle_states(per_actor[actor], lifecycle, as_of))
        derived = derived + life
    derived.sort(key=lambda d: (d.timestamp, d.canonical_actor_id, LEVEL_RANK[d.level], d.source_event_id,
                                d.state_id))
    return derived


def actor_properties(events: Iterable[NormalizedEvent]) -> dict[str, dict[str, Scalar]]:
    """Per canonical actor, last-write-wins merge of event context (user_agent excluded)."""
    props: dict[str, dict[str, Scalar]] = defaultdict(dict)
    for ev in events:
        target = props[ev.canonical_actor_id]
        for k, v in ev.context.items():
            if k != "user_agent":
                target[k] = v
    return dict(props)
