"""Small builders for hand-made journeys and snapshots."""

from __future__ import annotations

from collections.abc import Sequence

from bip.domain import DAY, HOUR, JourneyDefinition, SegmentDefinition, TimeWindow
from bip.graph import GraphSnapshot, JourneyInstance, build_snapshot

T0 = 1_704_067_200_000  # 2024-01-01T00:00:00Z
WEEK_MS = 7 * DAY

JDEF = JourneyDefinition(
    journey_id="onboarding",
    start_states=frozenset({"sign_up"}),
    terminal_map={"purchase": "converted", "left": "dropped_off"},
    inactivity_timeout=30 * DAY,
)


def window(week: int = 0) -> TimeWindow:
    return TimeWindow(T0 + week * WEEK_MS, T0 + (week + 1) * WEEK_MS)


def journey(states: Sequence[str], outcome: str, actor: str = "u", start: int = T0) -> JourneyInstance:
    visits = [(s, start + i * HOUR) for i, s in enumerate(states)]
    back = [(a, b) for i, (a, b) in enumerate(zip(states, states[1:])) if b in states[: i + 1]]
    return JourneyInstance(actor, visits, outcome, "w", visits[-1][1], back_edges=back)


def journeys(spec: Sequence[tuple[Sequence[str], str, int]], week: int = 0, prefix: str = "a") -> list[JourneyInstance]:
    """Expand ``(states, outcome, count)`` triples, one actor per journey."""
    out = []
    start = window(week).start
    for k, (states, outcome, count) in enumerate(spec):
        for i in range(count):
            out.append(journey(states, outcome, f"{prefix}{k}-{i}", start))
    return out


def snapshot(spec: Sequence[tuple[Sequence[str], str, int]], week: int = 0,
             segment: SegmentDefinition | None = None, actor_props=None) -> GraphSnapshot:
    return build_snapshot(journeys(spec, week), JDEF, window(week), segment, actor_props)
