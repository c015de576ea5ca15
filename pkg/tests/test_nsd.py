from __future__ import annotations

import random

import pytest
from helpers import T0
from hypothesis import given
from hypothesis import strategies as st

from bip.domain import DAY, HOUR, MINUTE, SECOND, Condition, RawEvent, format_timestamp
from bip.errors import ConfigError
from bip.nsd import (
    BotRules,
    Level,
    LifecycleRule,
    LifecycleRuleSet,
    SemanticRule,
    StateRuleSet,
    actor_properties,
    deduplicate,
    derive_lifecycle_states,
    derive_semantic_states,
    derive_states,
    filter_bots,
    normalize_stream,
    resolve_identities,
)

IMPORT_RULE = SemanticRule("r1", "import_data", "button_click", (Condition("button", "equals", "import"),))


def _ev(eid: str, ts: int, name: str = "page_view", actor: str = "a", props=None, ua: str = "Mozilla") -> RawEvent:
    return RawEvent(eid, actor, name, ts, props or {}, {"user_agent": ua})


def _normalized(events):
    return resolve_identities(events, ())[1]


def test_deduplicate_window():
    assert len(deduplicate([_ev("x", T0), _ev("x", T0 + SECOND)], 5 * MINUTE)) == 1
    assert len(deduplicate([_ev("x", T0), _ev("x", T0 + 10 * MINUTE)], 5 * MINUTE)) == 2
    unique = [_ev(f"e{i}", T0 + i) for i in range(1000)]
    assert deduplicate(unique, 5 * MINUTE) == unique


@given(st.lists(st.tuples(st.sampled_from("abcde"), st.integers(0, 600_000)), max_size=60))
def test_deduplicate_preserves_order(items):
    events = [_ev(eid, T0 + ts) for eid, ts in sorted(items, key=lambda x: x[1])]
    out = deduplicate(events, 5 * MINUTE)
    positions = [events.index(e) for e in out]
    assert positions == sorted(positions)


def test_filter_bots_user_agent_and_rate():
    kept, dropped = filter_bots([_ev("h", T0, ua="HealthCheck/1.0")], BotRules(ua_substrings=("HealthCheck",)))
    assert not kept and dropped[0].reason == "ua_match"

    flood = [_ev(f"b{i}", T0 + i * 100, actor="bot") for i in range(3000)]  # 600/min for 5 minutes
    calm = [_ev(f"c{i}", T0 + i * 30 * SECOND, actor="human") for i in range(10)]  # 2/min
    rules = BotRules(ua_substrings=(), max_rate=300, sustain=2 * MINUTE)
    kept, dropped = filter_bots(sorted(flood + calm, key=lambda e: e.timestamp), rules)
    assert {e.actor_id for e in kept} == {"human"}
    assert len(dropped) == 3000 and {d.reason for d in dropped} == {"rate_heuristic"}


def _alias(eid: str, ts: int, anon: str, user: str) -> RawEvent:
    return RawEvent(eid, anon, "identify", ts, {"anonymous_id": anon, "user_id": user})


def test_identity_resolution():
    events = [_ev("1", T0, actor="A"), _alias("2", T0 + HOUR, "A", "U"), _ev("3", T0 + 2 * HOUR, actor="U")]
    alias_map, out, _ = resolve_identities(events, {"identify"})
    assert alias_map["A"] == "U"
    assert {e.canonical_actor_id for e in out} == {"U"}


def test_identity_conflict_takes_earliest_user():
    events = [_alias("1", T0 + DAY, "A", "U1"), _alias("2", T0 + 2 * DAY, "A", "U2")]
    alias_map, _, report = resolve_identities(events, {"identify"})
    assert alias_map == {"A": "U1", "U1": "U1", "U2": "U1"}
    assert report.multi_user_components == [["U1", "U2"]]


def test_identity_without_aliases_is_identity():
    events = [_ev("1", T0, actor="A"), _ev("2", T0, actor="B")]
    alias_map, out, _ = resolve_identities(events, {"identify"})
    assert alias_map == {}
    assert [e.canonical_actor_id for e in out] == ["A", "B"]


def test_normalize_stream_lag_and_tie_break():
    now = T0 + 100 * HOUR
    recs = [
        {"event_id": "b", "actor_id": "a", "event_name": "x", "timestamp": format_timestamp(now - HOUR)},
        {"event_id": "a", "actor_id": "a", "event_name": "x", "timestamp": format_timestamp(now - HOUR)},
        {"event_id": "old", "actor_id": "a", "event_name": "x", "timestamp": format_timestamp(now - 48 * HOUR)},
        {"event_id": "bad", "actor_id": "a", "event_name": "x", "timestamp": "soon"},
        {"event_id": "nest", "actor_id": "a", "event_name": "x", "timestamp": format_timestamp(now),
         "properties": {"deep": {"x": 1}}},
    ]
    accepted, quarantined = normalize_stream(recs, 24 * HOUR, now)
    assert [e.event_id for e in accepted] == ["a", "b"]
    reasons = {q.record["event_id"]: q.reason for q in quarantined}
    assert reasons["old"] == "late"
    assert reasons["bad"].startswith("unparseable_timestamp")
    assert reasons["nest"].startswith("invalid_event")


def test_semantic_rules_first_match_and_fallback():
    rules = StateRuleSet((IMPORT_RULE, SemanticRule("r2", "clicked", "button_*")))
    events = _normalized([
        _ev("1", T0, "button_click", props={"button": "import"}),
        _ev("2", T0 + 1, "button_click", props={"button": "other"}),
        _ev("3", T0 + 2, "page_view"),
    ])
    out = derive_semantic_states(events, rules)
    assert [(d.state_id, d.level) for d in out] == [
        ("import_data", Level.SEMANTIC), ("clicked", Level.SEMANTIC), ("page_view", Level.RAW_EVENT)]
    assert derive_semantic_states(events, StateRuleSet(rules.rules, "drop"))[-1].state_id == "clicked"
    with pytest.raises(ConfigError):
        StateRuleSet((IMPORT_RULE, IMPORT_RULE))


def test_semantic_state_space_is_compressed():
    rng = random.Random(3)
    names = [f"evt_{i:03d}" for i in range(200)]
    rules = StateRuleSet(tuple(SemanticRule(f"r{k}", f"state_{k % 20}", f"evt_{k}*") for k in range(20)), "drop")
    events = _normalized([_ev(str(i), T0 + i, rng.choice(names)) for i in range(5000)])
    assert len({d.state_id for d in derive_semantic_states(events, rules)}) <= 30


def test_lifecycle_fold():
    rules = LifecycleRuleSet((
        LifecycleRule("new_user"),
        LifecycleRule("activated", trigger="import_data", within=7 * DAY),
        LifecycleRule("churned", trigger="any_event", absence_for=30 * DAY),
    ))
    history = derive_semantic_states(_normalized([
        _ev("1", T0, "sign_up"), _ev("2", T0 + 2 * DAY, "import_data"), _ev("3", T0 + 3 * DAY, "settings"),
    ]), StateRuleSet())
    out = derive_lifecycle_states(history, rules, as_of=T0 + 40 * DAY)
    assert [(d.state_id, d.timestamp) for d in out] == [
        ("new_user", T0), ("activated", T0 + 2 * DAY), ("churned", T0 + 33 * DAY)]
    assert all(d.level is Level.LIFECYCLE for d in out)
    assert [d.state_id for d in derive_lifecycle_states(history, rules, as_of=T0 + 10 * DAY)] == [
        "new_user", "activated"]


def test_late_trigger_does_not_activate():
    rules = LifecycleRuleSet((LifecycleRule("activated", trigger="import_data", within=7 * DAY),))
    history = derive_semantic_states(_normalized([
        _ev("1", T0, "sign_up"), _ev("2", T0 + 9 * DAY, "import_data")]), StateRuleSet())
    assert derive_lifecycle_states(history, rules) == []


@given(st.lists(st.tuples(st.sampled_from(["sign_up", "button_click", "page_view"]),
                          st.sampled_from(["import", "other"]), st.integers(0, 10 * DAY),
                          st.sampled_from("pq")), max_size=40))
def test_traceability_and_determinism(rows):
    raw = [_ev(f"e{i}", T0 + ts, name, actor, {"button": b}) for i, (name, b, ts, actor) in enumerate(rows)]
    events = _normalized(raw)
    lifecycle = LifecycleRuleSet((LifecycleRule("new_user"),))
    derived = derive_states(events, StateRuleSet((IMPORT_RULE,)), lifecycle)
    by_id = {e.event_id: e for e in events}
    for d in derived:
        assert d.source_event_id in by_id
        assert by_id[d.source_event_id].canonical_actor_id == d.canonical_actor_id
    assert derive_states(events, StateRuleSet((IMPORT_RULE,)), lifecycle) == derived


def test_normalization_is_idempotent():
    now = T0 + DAY
    recs = [_ev(f"e{i}", T0 + (i * 7919) % DAY) for i in range(50)]
    once, _ = normalize_stream(recs, 90 * DAY, now)
    twice, _ = normalize_stream(once, 90 * DAY, now)
    assert once == twice
    assert deduplicate(deduplicate(once, MINUTE), MINUTE) == deduplicate(once, MINUTE)


def test_actor_properties_last_write_wins():
    events = _normalized([
        RawEvent("1", "a", "x", T0, {}, {"platform": "web", "user_agent": "ua"}),
        RawEvent("2", "a", "x", T0 + 1, {}, {"platform": "mobile"}),
    ])
    assert actor_properties(events) == {"a": {"platform": "mobile"}}
