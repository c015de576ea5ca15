"""Post-generation verification: every number must come from the bundle, and no causal wording."""

from __future__ import annotations

import re
from collections.abc import Iterable
from dataclasses import dataclass
from typing import Any

from bip.gll.bundle import FactBundle

FORBIDDEN_LEXICON = ("causes", "caused", "drives", "leads to", "because of")

# Numbers not glued to identifiers (so "v2.3" or "step_2" are names, not claims).
NUMBER_RE = re.compile(
    r"(?<![A-Za-z0-9_.\-])(-?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?)(%|x\b|pp\b)?(?![A-Za-z0-9_])"
)


@dataclass(frozen=True)
class NumericToken:
    text: str
    value: float
    decimals: int
    percent: bool


def extract_numbers(text: str) -> list[NumericToken]:
    out = []
    for m in NUMBER_RE.finditer(text):
        raw, suffix = m.group(1), m.group(2) or ""
        plain = raw.replace(",", "")
        decimals = len(plain.split(".", 1)[1]) if "." in plain else 0
        value = float(plain)
        percent = suffix in ("%", "pp")
        if percent:
            value /= 100.0
            decimals += 2
        out.append(NumericToken(m.group(0), value, decimals, percent))
    return out


def bundle_values(bundle: FactBundle) -> list[float]:
    """Full-precision evidence numbers plus every number displayed in the rendered context."""
    values: list[float] = []
    for fact in bundle.facts:
        values.extend(float(v) for v in fact.evidence.values()
                      if isinstance(v, (int, float)) and not isinstance(v, bool))
        values.append(float(fact.confidence[0]))
    values.extend(t.value for t in extract_numbers(bundle.rendered_context))
    return values


def _shown(x: float, decimals: int) -> str:
    text = f"{x:.{decimals}f}"
    return text[1:] if text.startswith("-") and float(text) == 0 else text


def _matches(tok: NumericToken, values: Iterable[float]) -> bool:
    """A claim holds when some bundle value displays as the claimed token at its precision."""
    target = _shown(tok.value, tok.decimals)
    return any(_shown(v, tok.decimals) == target for v in values)


def lexicon_hits(text: str, lexicon: Iterable[str] = FORBIDDEN_LEXICON) -> list[str]:
    lowered = text.lower()
    return [w for w in lexicon if re.search(r"\b" + re.escape(w) + r"\b", lowered)]


@dataclass(frozen=True)
class FaithfulnessReport:
    claims: tuple[tuple[str, bool], ...]
    forbidden: tuple[str, ...]

    @property
    def faithful(self) -> bool:
        return not self.forbidden and all(ok for _, ok in self.claims)

    @property
    def verified_fraction(self) -> float:
        return sum(ok for _, ok in self.claims) / len(self.claims) if self.claims else 1.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "faithful": self.faithful,
            "claims": [{"token": t, "verified": ok} for t, ok in self.claims],
            "forbidden_terms": list(self.forbidden),
        }


def check_faithfulness(
    text: str, bundle: FactBundle, lexicon: Iterable[str] = FORBIDDEN_LEXICON
) -> FaithfulnessReport:
    values = bundle_values(bundle)
    claims = tuple((tok.text, _matches(tok, values)) for tok in extract_numbers(text))
    return FaithfulnessReport(claims, tuple(lexicon_hits(text, lexicon)))
