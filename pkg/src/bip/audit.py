"""Traceability audit: recompute sampled fact evidence from the provenance snapshots."""

from __future__ import annotations

import math
import random
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from bip.bkg import BehavioralFact
from bip.canonical import iter_jsonl
from bip.config import load_config
from bip.detectors.evidence import recompute_evidence
from bip.errors import BipError, MissingArtifact
from bip.graph import GraphSnapshot
from bip.pipeline import load_snapshots

NUMERIC_TOL = 1e-9


@dataclass(frozen=True)
class FactAudit:
    fact_id: str
    matched: bool
    mismatched_keys: tuple[str, ...]
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"fact_id": self.fact_id, "matched": self.matched,
                "mismatched_keys": list(self.mismatched_keys), "error": self.error}


@dataclass(frozen=True)
class AuditReport:
    sampled: tuple[str, ...]
    results: tuple[FactAudit, ...]

    @property
    def rate(self) -> float:
        return sum(r.matched for r in self.results) / len(self.results) if self.results else 1.0

    @property
    def mismatches(self) -> tuple[str, ...]:
        return tuple(r.fact_id for r in self.results if not r.matched)

    def to_dict(self) -> dict[str, Any]:
        return {"sampled": list(self.sampled), "rate": self.rate, "mismatches": list(self.mismatches),
                "results": [r.to_dict() for r in self.results]}


def values_match(stored: Any, fresh: Any, tol: float = NUMERIC_TOL) -> bool:
    if isinstance(stored, bool) or isinstance(fresh, bool):
        return type(stored) is type(fresh) and stored == fresh
    if isinstance(stored, (int, float)) and isinstance(fresh, (int, float)):
        return math.isclose(float(stored), float(fresh), rel_tol=tol, abs_tol=tol)
    return stored == fresh


def audit_fact(fact: BehavioralFact, snapshots: Mapping[str, GraphSnapshot], cfg, releases) -> FactAudit:
    sid = fact.provenance.get("snapshot_id", "")
    if sid not in snapshots:
        return FactAudit(fact.fact_id, False, (), f"provenance snapshot {sid!r} is missing")
    try:
        fresh = recompute_evidence(fact.evidence, snapshots[sid], snapshots, cfg, releases)
    except (BipError, KeyError, ValueError) as exc:
        return FactAudit(fact.fact_id, False, (), f"{type(exc).__name__}: {exc}")
    keys = sorted(set(fact.evidence) | set(fresh))
    bad = tuple(k for k in keys if k not in fact.evidence or k not in fresh
                or not values_match(fact.evidence[k], fresh[k]))
    return FactAudit(fact.fact_id, not bad, bad)


def audit_traceability(out_dir: str | Path, sample_size: int = 200, seed: int = 0) -> AuditReport:
    """Seeded sample of stored facts; a fact matches when every evidence value is reproduced."""
    out = Path(out_dir)
    for name in ("facts.jsonl", "config.resolved.yaml", "snapshots"):
        if not (out / name).exists():
            raise MissingArtifact(f"missing artifact {out / name}; run the pipeline first")
    if sample_size < 1:
        raise ValueError("sample_size must be >= 1")
    cfg = load_config(out / "config.resolved.yaml")
    snapshots = load_snapshots(out)
    facts = {d["fact_id"]: BehavioralFact.from_dict(d) for d in iter_jsonl(out / "facts.jsonl")}
    ids = sorted(facts)
    sampled = ids if sample_size >= len(ids) else sorted(random.Random(seed).sample(ids, sample_size))
    results = tuple(audit_fact(facts[i], snapshots, cfg.detectors, cfg.release_pairs) for i in sampled)
    return AuditReport(tuple(sampled), results)
