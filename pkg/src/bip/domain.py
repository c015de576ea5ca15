"""Shared domain types, time helpers and structural validation.

Instants are integer milliseconds since the Unix epoch (UTC) and durations
are integer milliseconds. Windows are half-open ``[start, end)``.
"""

from __future__ import annotations

import math
import re
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Any, Union

from bip.errors import (
    ConfigError,
    EmptyTerminalMap,
    NonPositiveLength,
    OverlappingStartTerminal,
    TypeMismatch,
    UnknownState,
)

Scalar = Union[str, int, float, bool]

SECOND = 1000
MINUTE = 60 * SECOND
HOUR = 60 * MINUTE
DAY = 24 * HOUR
WEEK = 7 * DAY

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
_TS_RE = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})[Tt ](\d{2}):(\d{2}):(\d{2})(?:\.(\d+))?"
    r"(Z|z|[+-]\d{2}:?\d{2})$"
)
_DURATION_UNITS = {"ms": 1, "s": SECOND, "m": MINUTE, "h": HOUR, "d": DAY, "w": WEEK}
_DURATION_RE = re.compile(r"^\s*(\d+)\s*(ms|s|m|h|d|w)\s*$")


# -- time ----------------------------------------------------------------


def parse_timestamp(value: str) -> int:
    """Parse an RFC3339 timestamp into UTC epoch milliseconds.

    Sub-millisecond digits are truncated. An explicit offset is required;
    naive timestamps are ambiguous and raise ``ValueError``.
    """
    if not isinstance(value, str):
        raise ValueError(f"timestamp must be a string, got {type(value).__name__}")
    m = _TS_RE.match(value.strip())
    if m is None:
        raise ValueError(f"unparseable timestamp: {value!r}")
    year, month, day, hour, minute, second, frac, tz = m.groups()
    dt = datetime(int(year), int(month), int(day), int(hour), int(minute), int(second), tzinfo=timezone.utc)
    ms = int(((frac or "") + "000")[:3])
    if tz not in ("Z", "z"):
        sign = 1 if tz[0] == "+" else -1
        digits = tz[1:].replace(":", "")
        offset = timedelta(hours=int(digits[:2]), minutes=int(digits[2:]))
        dt = dt - sign * offset
    delta = dt - _EPOCH
    return (delta.days * 86400 + delta.seconds) * 1000 + ms


def format_timestamp(ms: int) -> str:
    dt = _EPOCH + timedelta(milliseconds=ms)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ms % 1000:03d}Z"


def parse_duration(value: Any) -> int:
    """``"7d"``, ``"30m"``, ``"500ms"`` or a bare integer of milliseconds."""
    if isinstance(value, bool):
        raise ConfigError(f"invalid duration: {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        m = _DURATION_RE.match(value)
        if m:
            return int(m.group(1)) * _DURATION_UNITS[m.group(2)]
    raise ConfigError(f"invalid duration: {value!r}")


def format_duration(ms: int) -> str:
    for unit in ("w", "d", "h", "m", "s"):
        size = _DURATION_UNITS[unit]
        if ms and ms % size == 0:
            return f"{ms // size}{unit}"
    return f"{ms}ms"


@dataclass(frozen=True, slots=True)
class TimeWindow:
    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start

    def contains(self, ts: int) -> bool:
        return self.start <= ts < self.end

    def overlaps(self, other: TimeWindow) -> bool:
        return self.start < other.end and other.start < self.end

    def is_empty(self) -> bool:
        return self.end <= self.start

    def previous(self) -> TimeWindow:
        return TimeWindow(self.start - self.length, self.start)

    def to_dict(self) -> dict[str, str]:
        return {"start": format_timestamp(self.start), "end": format_timestamp(self.end)}

    @classmethod
    def from_dict(cls, d: Mapping[str, str]) -> TimeWindow:
        return cls(parse_timestamp(d["start"]), parse_timestamp(d["end"]))


def resolve_window(anchor: int, length: int) -> TimeWindow:
    if length <= 0:
        raise NonPositiveLength(f"window length must be positive, got {length}")
    return TimeWindow(anchor - length, anchor)


# -- events --------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class RawEvent:
    event_id: str
    actor_id: str
    event_name: str
    timestamp: int
    properties: Mapping[str, Scalar] = field(default_factory=dict)
    context: Mapping[str, Scalar] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.event_id:
            raise ValueError("event_id must be non-empty")

    @property
    def user_agent(self) -> str:
        ua = self.context.get("user_agent", "")
        return ua if isinstance(ua, str) else str(ua)

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "actor_id": self.actor_id,
            "event_name": self.event_name,
            "timestamp": format_timestamp(self.timestamp),
            "properties": dict(self.properties),
            "context": dict(self.context),
        }


def check_scalar_map(obj: Any, name: str) -> dict[str, Scalar]:
    """Reject anything but a flat map of str/int/float/bool."""
    if obj is None:
        return {}
    if not isinstance(obj, Mapping):
        raise ValueError(f"{name} must be an object")
    out: dict[str, Scalar] = {}
    for key, value in obj.items():
        if not isinstance(key, str):
            raise ValueError(f"{name} keys must be strings")
        if not isinstance(value, (str, int, float, bool)):
            raise ValueError(f"{name}.{key} is not a scalar")
        if isinstance(value, float) and not math.isfinite(value):
            raise ValueError(f"{name}.{key} is not finite")
        out[key] = value
    return out


class TerminalOutcome(str, Enum):
    CONVERTED = "converted"
    CHURNED = "churned"
    INACTIVE = "inactive"
    RETAINED = "retained"
    DROPPED_OFF = "dropped_off"

    def __str__(self) -> str:
        return self.value


OUTCOME_ORDER: tuple[TerminalOutcome, ...] = tuple(TerminalOutcome)


# -- predicates ----------------------------------------------------------

_OP_ALIASES = {
    "==": "equals", "eq": "equals", "equals": "equals",
    "in": "one_of", "one_of": "one_of",
    "exists": "exists",
    ">": "gt", "gt": "gt",
    ">=": "gte", "gte": "gte",
    "<": "lt", "lt": "lt",
    "<=": "lte", "lte": "lte",
}
_NUMERIC_OPS = {"gt", "gte", "lt", "lte"}


@dataclass(frozen=True, slots=True)
class Condition:
    property: str
    op: str
    value: Any = None

    def __post_init__(self) -> None:
        op = _OP_ALIASES.get(self.op)
        if op is None:
            raise ConfigError(f"unknown operator {self.op!r}")
        object.__setattr__(self, "op", op)
        if op == "one_of":
            if not isinstance(self.value, (list, tuple)):
                raise ConfigError("one_of needs a list operand")
            object.__setattr__(self, "value", tuple(self.value))
        if op in _NUMERIC_OPS and not _is_number(self.value):
            raise ConfigError(f"{op} needs a numeric operand")

    def holds(self, props: Mapping[str, Any]) -> bool:
        if self.op == "exists":
            return self.property in props
        if self.property not in props:
            return False
        actual = props[self.property]
        if self.op == "equals":
            if isinstance(actual, bool) or isinstance(self.value, bool):
                return actual is self.value
            return actual == self.value
        if self.op == "one_of":
            return actual in self.value
        if not _is_number(actual):
            raise TypeMismatch(f"{self.property}={actual!r} is not numeric")
        if self.op == "gt":
            return actual > self.value
        if self.op == "gte":
            return actual >= self.value
        if self.op == "lt":
            return actual < self.value
        return actual <= self.value

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"property": self.property, "op": self.op}
        if self.op != "exists":
            d["value"] = list(self.value) if self.op == "one_of" else self.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Condition:
        return cls(d["property"], d["op"], d.get("value"))


def _is_number(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def conditions_hold(conditions: Iterable[Condition], props: Mapping[str, Any]) -> bool:
    return all(c.holds(props) for c in conditions)


@dataclass(frozen=True, slots=True)
class SegmentDefinition:
    segment_id: str
    conditions: tuple[Condition, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"segment_id": self.segment_id, "conditions": [c.to_dict() for c in self.conditions]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SegmentDefinition:
        return cls(d["segment_id"], tuple(Condition.from_dict(c) for c in d.get("conditions", ())))


ALL_SEGMENT = SegmentDefinition("all")


def evaluate_segment(seg: SegmentDefinition, actor_props: Mapping[str, Any]) -> bool:
    """True iff every condition holds. Raises ``TypeMismatch`` on bad numeric data."""
    return conditions_hold(seg.conditions, actor_props)


# -- journeys ------------------------------------------------------------


@dataclass(frozen=True)
class JourneyDefinition:
    journey_id: str
    start_states: frozenset[str]
    terminal_map: Mapping[str, TerminalOutcome]
    inactivity_timeout: int
    timeout_outcome: TerminalOutcome = TerminalOutcome.DROPPED_OFF
    session_gap: int = 30 * MINUTE
    levels: tuple[str, ...] = ("raw_event", "semantic")

    def __post_init__(self) -> None:
        object.__setattr__(self, "start_states", frozenset(self.start_states))
        object.__setattr__(
            self, "terminal_map", {k: TerminalOutcome(v) for k, v in dict(self.terminal_map).items()}
        )
        object.__setattr__(self, "timeout_outcome", TerminalOutcome(self.timeout_outcome))
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.start_states:
            raise ConfigError(f"journey {self.journey_id!r}: start_states must be non-empty")
        if self.inactivity_timeout <= 0:
            raise ConfigError(f"journey {self.journey_id!r}: inactivity_timeout must be positive")
        if self.session_gap <= 0:
            raise ConfigError(f"journey {self.journey_id!r}: session_gap must be positive")

    @property
    def absorbing(self) -> tuple[TerminalOutcome, ...]:
        used = set(self.terminal_map.values()) | {self.timeout_outcome}
        return tuple(o for o in OUTCOME_ORDER if o in used)

    def to_dict(self) -> dict[str, Any]:
        return {
            "journey_id": self.journey_id,
            "start_states": sorted(self.start_states),
            "terminal_map": {k: v.value for k, v in sorted(self.terminal_map.items())},
            "inactivity_timeout": format_duration(self.inactivity_timeout),
            "timeout_outcome": self.timeout_outcome.value,
            "session_gap": format_duration(self.session_gap),
            "levels": list(self.levels),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> JourneyDefinition:
        return cls(
            journey_id=d["journey_id"],
            start_states=frozenset(d["start_states"]),
            terminal_map=dict(d["terminal_map"]),
            inactivity_timeout=parse_duration(d["inactivity_timeout"]),
            timeout_outcome=TerminalOutcome(d.get("timeout_outcome", "dropped_off")),
            session_gap=parse_duration(d.get("session_gap", "30m")),
            levels=tuple(d.get("levels", ("raw_event", "semantic"))),
        )


def validate_journey_definition(jdef: JourneyDefinition, known_states: Iterable[str]) -> JourneyDefinition:
    """Check that the journey is well-formed against the known state space.

    Returns *jdef* unchanged, so validation is idempotent.
    """
    known = set(known_states)
    if not known:
        raise ConfigError("known_states must be non-empty")
    if not jdef.terminal_map:
        raise EmptyTerminalMap(f"journey {jdef.journey_id!r} has no terminal states")
    overlap = jdef.start_states & set(jdef.terminal_map)
    if overlap:
        raise OverlappingStartTerminal(
            f"journey {jdef.journey_id!r}: states both start and terminal: {sorted(overlap)}"
        )
    for state in sorted(jdef.start_states | set(jdef.terminal_map)):
        if state not in known:
            raise UnknownState(state)
    return jdef


# -- thresholds and weights ----------------------------------------------


@dataclass(frozen=True)
class DetectorConfig:
    tau_reach: float = 0.05
    tau_lift: float = 1.5
    tau_exit: float = 0.5
    tau_loop: float = 1.5
    tau_n: int = 100
    tau_candidate: float = 1000.0
    significance_alpha: float = 0.05
    # extensions beyond the core thresholds
    top_k: int = 3
    tau_divergence: float = 0.02
    tau_reach_delta: float = 0.05
    target_outcome: str = "converted"
    dropoff_outcome: str = "dropped_off"
    top_fast_paths: int = 3
    path_quality_factors: str = "both"

    def __post_init__(self) -> None:
        for name in ("tau_reach", "tau_lift", "tau_exit", "tau_loop", "tau_candidate",
                     "tau_divergence", "tau_reach_delta"):
            value = getattr(self, name)
            if not _is_number(value) or not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be a finite non-negative number")
        if not isinstance(self.tau_n, int) or self.tau_n < 1:
            raise ConfigError("tau_n must be an integer >= 1")
        if not 0 < self.significance_alpha < 1:
            raise ConfigError("significance_alpha must lie in (0, 1)")
        if self.top_k < 1 or self.top_fast_paths < 1:
            raise ConfigError("top_k and top_fast_paths must be >= 1")
        if self.path_quality_factors not in ("both", "duration", "length"):
            raise ConfigError("path_quality_factors must be both|duration|length")

    @property
    def n_min(self) -> int:
        return self.tau_n

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> DetectorConfig:
        return cls(**d)


TABLE1_WEIGHTS = (0.30, 0.25, 0.20, 0.15, 0.10)


@dataclass(frozen=True)
class ScoringWeights:
    alpha: float = 0.30
    beta: float = 0.25
    gamma: float = 0.20
    omega: float = 0.15
    epsilon: float = 0.10

    def __post_init__(self) -> None:
        values = self.as_tuple()
        if any(not _is_number(v) or not math.isfinite(v) or v < 0 for v in values):
            raise ConfigError("scoring weights must be finite and non-negative")
        if abs(math.fsum(values) - 1.0) > 1e-9:
            raise ConfigError(f"scoring weights must sum to 1, got {math.fsum(values)!r}")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.omega, self.epsilon)

    def to_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ConfidenceCoefficients:
    """Logistic confidence coefficients. Shipped defaults are uncalibrated."""

    a: float = 1.0
    b: float = 0.5
    c: float = 1.0
    high_min: float = 0.8
    medium_min: float = 0.5

    def __post_init__(self) -> None:
        if not (0 <= self.medium_min < self.high_min <= 1):
            raise ConfigError("label thresholds must satisfy 0 <= medium_min < high_min <= 1")

    def to_dict(self) -> dict[str, float]:
        return dict(self.__dict__)
