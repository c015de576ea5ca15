"""Proportion tests, temporal edge deltas, Jensen-Shannon divergence, confidence scoring.

The standard normal tail uses ``math.erfc`` (correctly rounded to double
precision on every CPython platform), comfortably inside the 1e-7 accuracy
that p-value reproducibility needs.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum

from bip.domain import ConfidenceCoefficients
from bip.errors import NotNormalized, WindowMismatch
from bip.graph import GraphSnapshot, split_edge

Z_CAP = 50.0


def normal_sf(z: float) -> float:
    """Upper tail of the standard normal."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def two_sided_p(z: float) -> float:
    return min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))


@dataclass(frozen=True)
class ProportionTest:
    p1: float
    p2: float
    n1: int
    n2: int
    z: float
    p_value: float
    zero_variance: bool = False
    low_power: bool = False


def two_proportion_z(successes1: int, n1: int, successes2: int, n2: int, n_min: int | None = None) -> ProportionTest:
    """Pooled two-proportion z-test, two-sided.

    When the pooled proportion is 0 or 1 no difference is measurable: the
    test comes back with ``z = 0``, ``p_value = 1`` and ``zero_variance`` set.
    """
    if n1 < 1 or n2 < 1:
        raise ValueError("both groups need at least one trial")
    if not (0 <= successes1 <= n1 and 0 <= successes2 <= n2):
        raise ValueError("successes must lie in [0, n]")
    p1, p2 = successes1 / n1, successes2 / n2
    low = n_min is not None and min(n1, n2) < n_min
    pooled = (successes1 + successes2) / (n1 + n2)
    if pooled <= 0.0 or pooled >= 1.0:
        return ProportionTest(p1, p2, n1, n2, 0.0, 1.0, zero_variance=True, low_power=low)
    se = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    z = (p1 - p2) / se
    return ProportionTest(p1, p2, n1, n2, z, two_sided_p(z), low_power=low)


class ReleaseLink(str, Enum):
    ANCHORED = "anchored"
    AMBIGUOUS = "ambiguous"
    NONE = "none"


@dataclass(frozen=True)
class EdgeDelta:
    edge: tuple[str, str]
    p_prev: float
    p_curr: float
    delta: float
    test: ProportionTest
    release_link: ReleaseLink
    release_id: str | None = None
    successes_prev: int = 0
    successes_curr: int = 0


def edge_exposure(snap: GraphSnapshot, src: str, dst: str) -> tuple[int, int]:
    """(edge count, total outgoing count of the source) in *snap*."""
    total = 0
    hits = 0
    for key, c in snap.edge_counts.items():
        a, b = split_edge(key)
        if a == src:
            total += c
            if b == dst:
                hits = c
    return hits, total


def link_release(releases: Sequence[tuple[str, int]], start: int, end: int) -> tuple[ReleaseLink, str | None]:
    inside = sorted((ts, rid) for rid, ts in releases if start <= ts < end)
    if not inside:
        return ReleaseLink.NONE, None
    if len(inside) > 1:
        return ReleaseLink.AMBIGUOUS, None
    return ReleaseLink.ANCHORED, inside[0][1]


def check_consecutive(prev: GraphSnapshot, curr: GraphSnapshot) -> None:
    if prev.journey_id != curr.journey_id or prev.segment_id != curr.segment_id:
        raise WindowMismatch("snapshots belong to different journeys or segments")
    if prev.window.end != curr.window.start:
        raise WindowMismatch("snapshot windows are not consecutive")


def transition_delta(
    prev: GraphSnapshot,
    curr: GraphSnapshot,
    edge: tuple[str, str],
    releases: Sequence[tuple[str, int]] = (),
    n_min: int | None = None,
) -> EdgeDelta:
    """Change in one edge's transition probability between consecutive snapshots.

    An edge missing from one snapshot counts as probability 0 over that
    snapshot's exposure of the source state. A source never left in one of
    the windows yields a flat, non-significant test.
    """
    check_consecutive(prev, curr)
    src, dst = edge
    k0, n0 = edge_exposure(prev, src, dst)
    k1, n1 = edge_exposure(curr, src, dst)
    p0 = k0 / n0 if n0 else 0.0
    p1 = k1 / n1 if n1 else 0.0
    if n0 and n1:
        test = two_proportion_z(k1, n1, k0, n0, n_min)
    else:
        test = ProportionTest(p1, p0, n1, n0, 0.0, 1.0, zero_variance=True, low_power=True)
    link, rid = link_release(releases, prev.window.end, curr.window.end)
    return EdgeDelta(edge, p0, p1, p1 - p0, test, link, rid, k0, k1)


def js_divergence(p: Mapping[str, float], q: Mapping[str, float]) -> float:
    """Base-2 Jensen-Shannon divergence of two distributions keyed by outcome (missing = 0)."""
    for name, dist in (("P", p), ("Q", q)):
        if any(v < 0 for v in dist.values()) or abs(math.fsum(dist.values()) - 1.0) > 1e-9:
            raise NotNormalized(f"{name} does not sum to 1")
    total = 0.0
    for key in sorted(set(p) | set(q)):
        a, b = p.get(key, 0.0), q.get(key, 0.0)
        m = 0.5 * (a + b)
        if a > 0:
            total += 0.5 * a * math.log2(a / m)
        if b > 0:
            total += 0.5 * b * math.log2(b / m)
    return min(1.0, max(0.0, total))


def logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def confidence_label(score: float, coeffs: ConfidenceCoefficients) -> str:
    if score >= coeffs.high_min:
        return "High"
    if score >= coeffs.medium_min:
        return "Medium"
    return "Low"


def confidence_score(
    z: float, n: int, effect: float, coeffs: ConfidenceCoefficients, n_min: int
) -> tuple[float, str]:
    """Logistic confidence ``sigma(a*z + b*ln(n/n_min) + c*|effect|)`` and its label."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = coeffs.a * z + coeffs.b * math.log(n / n_min) + coeffs.c * abs(effect)
    score = min(1.0, max(0.0, logistic(x)))
    return score, confidence_label(score, coeffs)


def clamp_z(z: float) -> float:
    return max(-Z_CAP, min(Z_CAP, z))
