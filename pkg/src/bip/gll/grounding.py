"""Pre-generation self-consistency checks over a bundle's numbers."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from typing import Any

from bip.gll.bundle import FactBundle

PROBABILITY_KEYS = frozenset({
    "reach_rate", "p_reached", "p_not_reached", "p_value", "population_reach", "exit_probability",
    "baseline_exit", "p", "p_dropoff", "p_prev", "p_curr", "conv_a", "conv_b", "reach_a", "reach_b",
    "affected_fraction", "conversion_rate", "jsd", "relative_quality",
})

LIFT_TOL = 1e-6
DISPLAY_LIFT_TOL = 0.05
CONFIDENCE_LABELS = frozenset({"High", "Medium", "Low"})


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"check": self.name, "passed": self.passed, "detail": self.detail}


@dataclass(frozen=True)
class GroundingReport:
    bundle_id: str
    checks: tuple[Check, ...]
    display_rounded: bool = False

    @property
    def overall(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict[str, Any]:
        return {
            "bundle_id": self.bundle_id,
            "overall": self.overall,
            "display_rounded": self.display_rounded,
            "checks": [c.to_dict() for c in self.checks],
        }


def _looks_rounded(x: float) -> bool:
    return round(x, 6) == x


def check_lift(ev: Mapping[str, Any]) -> tuple[bool, bool, str]:
    """(passed, display_rounded, detail) for lift against its two conditional rates."""
    if "lift" not in ev:
        return True, False, "no lift"
    lift, pr, pnr = ev["lift"], ev.get("p_reached"), ev.get("p_not_reached")
    if pr is None or not pnr:
        return False, False, "lift without both conditional rates"
    implied = pr / pnr
    rel = abs(lift - implied) / abs(lift) if lift else float("inf")
    if rel <= LIFT_TOL:
        return True, False, f"relative error {rel:.3g}"
    if all(_looks_rounded(float(v)) for v in (lift, pr, pnr)) and rel <= DISPLAY_LIFT_TOL:
        return True, True, f"display-rounded values, relative error {rel:.3g}"
    return False, False, f"lift {lift} vs implied {implied} (relative error {rel:.3g})"


def validate_grounding(bundle: FactBundle, n_min: int) -> GroundingReport:
    bad_prob: list[str] = []
    lift_ok, rounded, lift_detail = True, False, []
    bad_removal: list[str] = []
    bad_window: list[str] = []
    bad_conf: list[str] = []
    for fact in bundle.facts:
        ev = fact.evidence
        for k in sorted(PROBABILITY_KEYS & set(ev)):
            v = ev[k]
            if not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
                bad_prob.append(f"{fact.fact_id}.{k}={v}")
        ok, r, detail = check_lift(ev)
        lift_ok &= ok
        rounded |= r
        if "lift" in ev:
            lift_detail.append(f"{fact.fact_id}: {detail}")
        if "removal_effect" in ev and not -1.0 <= ev["removal_effect"] <= 1.0:
            bad_removal.append(f"{fact.fact_id}={ev['removal_effect']}")
        if fact.validity_window.is_empty():
            bad_window.append(fact.fact_id)
        score, label = fact.confidence
        if label not in CONFIDENCE_LABELS or not 0.0 <= score <= 1.0:
            bad_conf.append(fact.fact_id)
    n = bundle.primary_fact.evidence.get("sample_size")
    checks = (
        Check("probability_range", not bad_prob, "; ".join(bad_prob)),
        Check("lift_consistency", lift_ok, "; ".join(lift_detail)),
        Check("sample_size", isinstance(n, int) and n >= n_min, f"sample_size={n}, n_min={n_min}"),
        Check("removal_effect_range", not bad_removal, "; ".join(bad_removal)),
        Check("validity_window", not bad_window, "; ".join(bad_window)),
        Check("confidence_present", not bad_conf, "; ".join(bad_conf)),
    )
    return GroundingReport(bundle.bundle_id, checks, rounded)
