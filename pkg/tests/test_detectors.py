from __future__ import annotations

import json
import os
from dataclasses import replace
from pathlib import Path

import pytest
from helpers import T0, snapshot, window
from hypothesis import given
from hypothesis import strategies as st

from bip.canonical import canonical_json
from bip.detectors.builtin import (
    activation_ranking,
    detect_activation_drivers,
    detect_dropoffs,
    detect_path_quality,
    detect_regressions,
    detect_repeated_visits,
    detect_segment_divergence,
    rank_paths,
)
from bip.detectors.dag import DetectorInputs, Job, run_detector_dag, topological_levels
from bip.detectors.evidence import path_quality_score
from bip.detectors.findings import DETECTOR_VERSIONS, DetectorKind
from bip.detectors.scoring import COMPONENTS, rank_feed, score_interestingness, weighted_score
from bip.domain import DAY, TABLE1_WEIGHTS, Condition, DetectorConfig, ScoringWeights, SegmentDefinition
from bip.errors import ConfigError, CycleDetected, MissingComponent, WindowMismatch
from bip.markov import compute_metrics

GOLDEN = Path(__file__).parent / "golden" / "detectors.json"
WEIGHTS = ScoringWeights(*TABLE1_WEIGHTS)
SMALL = DetectorConfig(tau_n=20, tau_candidate=10.0, tau_exit=0.3, tau_loop=1.05, top_k=3)
MOBILE = SegmentDefinition("mobile", (Condition("platform", "equals", "mobile"),))
WEB = SegmentDefinition("web", (Condition("platform", "equals", "web"),))


def _spec(shift: int = 0):
    return [
        (["sign_up", "feature_used", "import_data"], "converted", 300 - shift),
        (["sign_up", "feature_used", "import_data"], "dropped_off", 40 + shift),
        (["sign_up", "feature_used"], "dropped_off", 200),
        (["sign_up"], "dropped_off", 250),
        (["sign_up", "settings", "sign_up", "feature_used", "import_data"], "converted", 60),
    ]


def _props(spec):
    """Mobile holds a third of converting journeys but half of the others."""
    props = {}
    for k, (_, outcome, count) in enumerate(spec):
        every = 3 if outcome == "converted" else 2
        for i in range(count):
            props[f"a{k}-{i}"] = {"platform": "mobile" if i % every == 0 else "web"}
    return props


def golden_inputs() -> DetectorInputs:
    prev = snapshot(_spec(), week=0)
    curr_spec = _spec(shift=150)
    curr = snapshot(curr_spec, week=1)
    props = _props(curr_spec)
    segs = (snapshot(curr_spec, 1, WEB, props), snapshot(curr_spec, 1, MOBILE, props))
    return DetectorInputs(curr, prev, segs, (("v2.0", window(1).start + DAY),))


# -- activation drivers ------------------------------------------------------


@pytest.fixture(scope="module")
def funnel_parts(funnel_run):
    return funnel_run.snapshot, compute_metrics(funnel_run.snapshot)


def test_activation_ranking_on_funnel(funnel_parts):
    snap, metrics = funnel_parts
    found = detect_activation_drivers(snap, metrics, DetectorConfig(tau_lift=1.0, top_k=3))
    assert activation_ranking(found) == ["import_data", "feature_used", "invite_teammate"]
    top = found[0].evidence
    assert top["reach_rate"] == pytest.approx(0.25, abs=0.01)
    assert top["p_reached"] == pytest.approx(0.58, abs=0.01)
    assert top["lift"] == pytest.approx(20, rel=0.15)
    assert top["removal_effect"] == pytest.approx(0.14, abs=0.005)


def test_activation_lift_filter(funnel_parts):
    snap, metrics = funnel_parts
    assert detect_activation_drivers(snap, metrics, DetectorConfig(tau_lift=100)) == []


def test_necessary_state_bypasses_lift_filter():
    spec = [(["sign_up", "checkout"], "converted", 150), (["sign_up", "checkout"], "dropped_off", 100),
            (["sign_up"], "dropped_off", 200)]
    snap = snapshot(spec)
    found = detect_activation_drivers(snap, compute_metrics(snap), DetectorConfig(tau_lift=1e6))
    assert [(f.subject, f.predicate) for f in found] == [("state:checkout", "necessary_for_conversion")]


# -- drop-offs ---------------------------------------------------------------


def test_dropoff_on_funnel(funnel_parts):
    snap, metrics = funnel_parts
    assert any("state:sign_up" in f.entities
               for f in detect_dropoffs(snap, metrics, DetectorConfig(tau_exit=0.4, tau_reach=0.5)))
    found = detect_dropoffs(snap, metrics, DetectorConfig(tau_exit=0.45, tau_reach=0.5))
    assert [f.entities for f in found] == [("state:sign_up",)]
    assert found[0].evidence["exit_probability"] == pytest.approx(0.46, abs=0.01)
    assert detect_dropoffs(snap, metrics, DetectorConfig(tau_exit=1.0)) == []


def test_adjacent_dropoffs_cluster(funnel_parts):
    snap, metrics = funnel_parts
    found = detect_dropoffs(snap, metrics, DetectorConfig(tau_exit=0.4, tau_reach=0.5))
    assert [f.entities for f in found] == [("state:feature_used", "state:sign_up")]


# -- regressions -------------------------------------------------------------


def test_regression_anchored_and_unanchored():
    inputs = golden_inputs()
    found = detect_regressions(inputs.previous, inputs.current, inputs.releases, SMALL)
    assert found and {f.predicate for f in found} == {"regressed_after"}
    assert all(f.object == "release:v2.0" for f in found)
    assert all(f.evidence["delta"] < 0 for f in found)
    bare = detect_regressions(inputs.previous, inputs.current, (), SMALL)
    assert {f.predicate for f in bare} == {"changed_after"}
    assert bare[0].object == f"snapshot:{inputs.previous.snapshot_id}"


def test_improvement_is_not_a_regression():
    inputs = golden_inputs()
    flipped = snapshot(_spec(), week=2)
    improved = detect_regressions(inputs.current, flipped, (), SMALL)
    assert all(f.evidence["delta"] < 0 for f in improved)
    assert not any("import_data>converted" in f.subject for f in improved)


def test_regression_needs_consecutive_windows():
    with pytest.raises(WindowMismatch):
        detect_regressions(snapshot(_spec(), 0), snapshot(_spec(), 2), (), SMALL)


# -- segment divergence ------------------------------------------------------


def test_identical_segments_do_not_diverge():
    snap = snapshot(_spec(), week=1)
    assert detect_segment_divergence(snap, snap, SMALL) == []


def test_divergence_symmetry():
    spec = [(["sign_up", "import_data"], "converted", 400), (["sign_up"], "dropped_off", 400)]
    props = {f"a0-{i}": {"platform": "web"} for i in range(400)}
    props |= {f"a1-{i}": {"platform": "mobile" if i % 2 else "web"} for i in range(400)}
    props |= {f"a0-{i}": {"platform": "mobile"} for i in range(0, 400, 4)}
    web, mobile = snapshot(spec, 0, WEB, props), snapshot(spec, 0, MOBILE, props)
    ab = detect_segment_divergence(web, mobile, SMALL)
    ba = detect_segment_divergence(mobile, web, SMALL)
    jsd = {f.evidence["jsd"] for f in ab if f.predicate == "diverges_from"}
    assert jsd and jsd == {f.evidence["jsd"] for f in ba if f.predicate == "diverges_from"}
    more = {f.subject for f in ab if f.predicate == "more_common_in"}
    assert "outcome:converted" in more
    assert more == {f.subject for f in ba if f.predicate == "less_common_in"}


# -- loops -------------------------------------------------------------------


def test_loop_detection_thresholds():
    once = snapshot([(["sign_up", "feature_used"], "converted", 50)])
    assert detect_repeated_visits(once, DetectorConfig(tau_loop=1.5)) == []
    every = detect_repeated_visits(once, DetectorConfig(tau_loop=0.0))
    assert {f.subject for f in every} == {"state:sign_up", "state:feature_used"}


def test_loop_fixture_mean_visits():
    # sign_up visits: seven journeys with 2, three with 3, so the mean is 2.3
    spec = [(["sign_up", "profile", "sign_up", "profile"], "converted", 7),
            (["sign_up", "profile", "sign_up", "profile", "sign_up"], "converted", 2),
            (["sign_up", "profile", "sign_up", "profile", "sign_up"], "dropped_off", 1)]
    snap = snapshot(spec)
    (f,) = [f for f in detect_repeated_visits(snap, DetectorConfig(tau_loop=1.5)) if f.subject == "state:sign_up"]
    assert f.evidence["mean_visits"] == pytest.approx(2.3, abs=1e-12)
    assert f.entities == ("state:sign_up", "state:profile")
    assert f.predicate == "exhibits_loop"


# -- path quality ------------------------------------------------------------


def test_path_quality_formula():
    assert path_quality_score(0.5, 2, 4) == 0.0625
    assert path_quality_score(0.5, 2, 4, "duration") == 0.25
    assert path_quality_score(0.5, 2, 4, "length") == 0.125


def test_path_ranking_prefers_short_duration_and_breaks_ties_lexically():
    spec = [(["sign_up", "b"], "converted", 30), (["sign_up", "a"], "converted", 30)]
    rows = rank_paths(snapshot(spec), SMALL)
    assert [r["path"].states[1] for r in rows] == ["a", "b"]
    assert rows[0]["quality"] == rows[1]["quality"]
    slow = snapshot([(["sign_up", "x", "y", "z"], "converted", 30), (["sign_up", "q"], "converted", 30)])
    assert rank_paths(slow, SMALL)[0]["path"].states == ("sign_up", "q")


def test_fast_paths_need_enough_occurrences():
    spec = [(["sign_up", "a"], "converted", 5), (["sign_up", "b", "c"], "converted", 50),
            (["sign_up", "b", "c", "d", "e", "f"], "dropped_off", 60)]
    found = detect_path_quality(snapshot(spec), SMALL)
    fast = [f.subject for f in found if f.predicate == "is_fast_path_to"]
    assert fast == ["path:sign_up>b>c|converted"]
    assert any(f.predicate == "is_optimization_target" for f in found)


# -- scoring -----------------------------------------------------------------


def test_weighted_score_examples():
    assert weighted_score([1] * 5, WEIGHTS) == pytest.approx(1.0, abs=1e-15)
    assert weighted_score([0] * 5, WEIGHTS) == 0.0
    assert weighted_score([0.95, 0.9, 0.8, 0.8, 0.5], WEIGHTS) == pytest.approx(0.84, abs=1e-12)


unit = st.floats(0, 1)


@given(st.lists(unit, min_size=5, max_size=5), st.lists(st.floats(0, 0.5), min_size=5, max_size=5),
       st.integers(0, 4), st.floats(1e-3, 0.5))
def test_dominance(base, bumps, strict, extra):
    y = base
    x = [min(1.0, b + d) for b, d in zip(base, bumps)]
    if x[strict] >= 1.0:
        return
    x[strict] = min(1.0, x[strict] + extra)
    assert weighted_score(x, WEIGHTS) > weighted_score(y, WEIGHTS)
    assert 0.0 <= weighted_score(y, WEIGHTS) <= 1.0


def test_scoring_requires_components():
    f = detect_repeated_visits(snapshot([(["sign_up", "p", "sign_up"], "converted", 30)]),
                               DetectorConfig(tau_loop=1.1))[0]
    broken = replace(f, evidence={k: v for k, v in f.evidence.items() if k != "p_value"})
    with pytest.raises(MissingComponent):
        score_interestingness(broken, WEIGHTS, SMALL)


def test_novelty_decays_over_repeats():
    f = detect_repeated_visits(snapshot([(["sign_up", "p", "sign_up"], "converted", 30)]),
                               DetectorConfig(tau_loop=1.1))[0]
    fresh = score_interestingness(f, WEIGHTS, SMALL).components["novelty"]
    seen = score_interestingness(f, WEIGHTS, SMALL, history=[[f], [f]]).components["novelty"]
    gap = score_interestingness(f, WEIGHTS, SMALL, history=[[], [f]]).components["novelty"]
    assert (fresh, seen, gap) == (1.0, 0.25, 1.0)


def test_rank_feed_orders_by_score_then_id():
    found = detect_path_quality(snapshot(_spec()), SMALL)
    feed = rank_feed([score_interestingness(f, WEIGHTS, SMALL) for f in found])
    assert [s.rank for s in feed] == list(range(1, len(feed) + 1))
    keys = [(-s.score, s.finding.finding_id) for s in feed]
    assert keys == sorted(keys)
    assert set(feed[0].components) == set(COMPONENTS)


# -- DAG ---------------------------------------------------------------------


def _const(value):
    return lambda inputs, cfg, coeffs, deps: value


def test_topological_levels():
    registry = [Job("snapA", _const(1)), Job("snapB", _const(2)), Job("single", _const([]), ("snapA",)),
                Job("regression", _const([]), ("snapA", "snapB"))]
    assert topological_levels(registry) == [["snapA", "snapB"], ["regression", "single"]]
    with pytest.raises(CycleDetected):
        topological_levels([Job("a", _const(0), ("b",)), Job("b", _const(0), ("a",))])
    with pytest.raises(ConfigError):
        topological_levels([Job("a", _const(0), ("missing",))])


def test_failing_detector_is_isolated():
    def boom(inputs, cfg, coeffs, deps):
        raise RuntimeError("kaput")

    inputs = golden_inputs()
    from bip.detectors.dag import DEFAULT_REGISTRY

    registry = [j if j.name != "UnexpectedLoop" else replace(j, run=boom) for j in DEFAULT_REGISTRY]
    registry.append(Job("after_loop", _const([]), ("UnexpectedLoop",), DetectorKind.UNEXPECTED_LOOP))
    result = run_detector_dag(inputs, SMALL, WEIGHTS, registry)
    assert result.errors["UnexpectedLoop"] == "RuntimeError: kaput"
    assert result.errors["after_loop"].startswith("skipped")
    assert not any(f.detector is DetectorKind.UNEXPECTED_LOOP for f in result.findings)
    assert any(f.detector is DetectorKind.PATH_QUALITY for f in result.findings)


def test_empty_inputs_give_empty_feed():
    result = run_detector_dag(DetectorInputs(None), SMALL, WEIGHTS)
    assert result.findings == [] and result.feed == [] and not result.errors


def _feed_bytes(workers: int) -> str:
    result = run_detector_dag(golden_inputs(), SMALL, WEIGHTS, workers=workers)
    return canonical_json([s.to_dict() for s in result.feed])


def test_dag_deterministic_across_workers():
    one = _feed_bytes(1)
    assert one == _feed_bytes(1) == _feed_bytes(8)


# -- golden fixture ----------------------------------------------------------


def _golden_view() -> dict:
    result = run_detector_dag(golden_inputs(), SMALL, WEIGHTS)
    return {
        "versions": {k.value: v for k, v in DETECTOR_VERSIONS.items()},
        "findings": [
            {"finding_id": f.finding_id, "detector": f.detector.value, "predicate": f.predicate,
             "entities": list(f.entities), "object": f.object}
            for f in result.findings
        ],
    }


def test_golden_findings_pinned_to_detector_versions():
    current = _golden_view()
    if os.environ.get("BIP_REGEN_GOLDEN"):
        GOLDEN.parent.mkdir(exist_ok=True)
        GOLDEN.write_text(json.dumps(current, indent=2, sort_keys=True) + "\n")
    pinned = json.loads(GOLDEN.read_text())
    assert pinned["versions"] == current["versions"], (
        "detector versions changed; regenerate with BIP_REGEN_GOLDEN=1 after reviewing the new output")
    assert pinned["findings"] == current["findings"], (
        "detector output changed without a detector_version bump")
    assert {f["detector"] for f in pinned["findings"]} >= {
        "ActivationDriver", "DropOffCluster", "TemporalRegression", "SegmentDivergence",
        "UnexpectedLoop", "PathQuality"}
    assert T0 > 0
