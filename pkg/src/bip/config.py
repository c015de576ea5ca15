"""Pipeline configuration: one YAML document, loaded into typed sections and dumped back losslessly."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from bip.canonical import SCHEMA_VERSION
from bip.detectors.findings import DetectorKind
from bip.detectors.scoring import DEFAULT_ACTIONABILITY
from bip.domain import (
    ConfidenceCoefficients,
    DetectorConfig,
    JourneyDefinition,
    SegmentDefinition,
    ScoringWeights,
    format_duration,
    parse_duration,
    parse_timestamp,
    format_timestamp,
)
from bip.errors import ConfigError
from bip.nsd import BotRules, LifecycleRuleSet, StateRuleSet


@dataclass(frozen=True)
class IngestConfig:
    lag_tolerance: int = parse_duration("90d")
    dedup_window: int = parse_duration("1d")
    alias_events: tuple[str, ...] = ("identify", "login")

    def to_dict(self) -> dict[str, Any]:
        return {
            "lag_tolerance": format_duration(self.lag_tolerance),
            "dedup_window": format_duration(self.dedup_window),
            "alias_events": list(self.alias_events),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> IngestConfig:
        base = cls()
        return cls(
            parse_duration(d.get("lag_tolerance", base.lag_tolerance)),
            parse_duration(d.get("dedup_window", base.dedup_window)),
            tuple(d.get("alias_events", base.alias_events)),
        )


@dataclass(frozen=True)
class FactConfig:
    support_min_probability: float = 0.2
    max_facts: int = 8
    min_confidence: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.support_min_probability <= 1:
            raise ConfigError("support_min_probability must lie in [0, 1]")
        if self.max_facts < 1:
            raise ConfigError("max_facts must be >= 1")
        if not 0 <= self.min_confidence <= 1:
            raise ConfigError("min_confidence must lie in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> FactConfig:
        return cls(**d)


@dataclass(frozen=True)
class Release:
    release_id: str
    timestamp: int

    def to_dict(self) -> dict[str, Any]:
        return {"release_id": self.release_id, "timestamp": format_timestamp(self.timestamp)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Release:
        return cls(str(d["release_id"]), parse_timestamp(d["timestamp"]))


def _actionability_from(d: Mapping[str, Any] | None) -> dict[DetectorKind, float]:
    table = dict(DEFAULT_ACTIONABILITY)
    for k, v in (d or {}).items():
        try:
            kind = DetectorKind(k)
        except ValueError:
            raise ConfigError(f"unknown detector {k!r} in actionability table") from None
        if not 0 <= float(v) <= 1:
            raise ConfigError(f"actionability for {k} must lie in [0, 1]")
        table[kind] = float(v)
    return table


@dataclass(frozen=True)
class PipelineConfig:
    journey: JourneyDefinition
    states: StateRuleSet = field(default_factory=StateRuleSet)
    lifecycle: LifecycleRuleSet = field(default_factory=LifecycleRuleSet)
    bots: BotRules = field(default_factory=BotRules)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    segments: tuple[SegmentDefinition, ...] = ()
    releases: tuple[Release, ...] = ()
    detectors: DetectorConfig = field(default_factory=DetectorConfig)
    weights: ScoringWeights = field(default_factory=ScoringWeights)
    actionability: Mapping[DetectorKind, float] = field(default_factory=lambda: dict(DEFAULT_ACTIONABILITY))
    confidence: ConfidenceCoefficients = field(default_factory=ConfidenceCoefficients)
    facts: FactConfig = field(default_factory=FactConfig)
    window_days: int = 28
    top_paths: int = 20
    novelty_lookback: int = 1

    def __post_init__(self) -> None:
        if self.window_days < 1:
            raise ConfigError("window_days must be >= 1")
        if self.top_paths < 1:
            raise ConfigError("top_paths must be >= 1")
        if self.novelty_lookback < 0:
            raise ConfigError("novelty_lookback must be >= 0")
        ids = [s.segment_id for s in self.segments]
        if len(set(ids)) != len(ids):
            raise ConfigError("segment ids must be unique")

    @property
    def release_pairs(self) -> tuple[tuple[str, int], ...]:
        return tuple((r.release_id, r.timestamp) for r in self.releases)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "journey": self.journey.to_dict(),
            "states": self.states.to_dict(),
            "lifecycle": self.lifecycle.to_dict(),
            "bots": self.bots.to_dict(),
            "ingest": self.ingest.to_dict(),
            "segments": [s.to_dict() for s in self.segments],
            "releases": [r.to_dict() for r in self.releases],
            "detectors": self.detectors.to_dict(),
            "scoring": {
                "weights": self.weights.to_dict(),
                "actionability": {k.value: v for k, v in self.actionability.items()},
            },
            "confidence": self.confidence.to_dict(),
            "facts": self.facts.to_dict(),
            "window_days": self.window_days,
            "top_paths": self.top_paths,
            "novelty_lookback": self.novelty_lookback,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PipelineConfig:
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version!r}")
        known = {f.name for f in fields(cls)} | {"schema_version", "scoring"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "journey" not in d:
            raise ConfigError("config needs a journey section")
        scoring = d.get("scoring") or {}
        try:
            return cls(
                journey=JourneyDefinition.from_dict(d["journey"]),
                states=StateRuleSet.from_dict(d.get("states") or {}),
                lifecycle=LifecycleRuleSet.from_list(d.get("lifecycle") or []),
                bots=BotRules.from_dict(d.get("bots") or {}),
                ingest=IngestConfig.from_dict(d.get("ingest") or {}),
                segments=tuple(SegmentDefinition.from_dict(s) for s in d.get("segments") or []),
                releases=tuple(Release.from_dict(r) for r in d.get("releases") or []),
                detectors=DetectorConfig.from_dict(d.get("detectors") or {}),
                weights=ScoringWeights(**(scoring.get("weights") or {})),
                actionability=_actionability_from(scoring.get("actionability")),
                confidence=ConfidenceCoefficients(**(d.get("confidence") or {})),
                facts=FactConfig.from_dict(d.get("facts") or {}),
                window_days=int(d.get("window_days", 28)),
                top_paths=int(d.get("top_paths", 20)),
                novelty_lookback=int(d.get("novelty_lookback", 1)),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path: str | Path) -> PipelineConfig:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, Mapping):
        raise ConfigError(f"config {path} is not a mapping")
    return PipelineConfig.from_dict(data)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def default_config_path() -> Path:
    return Path(__file__).parent / "data" / "example_funnel.yaml"
