from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import FUNNEL_ORDER, funnel_conversion, funnel_expected_steps, funnel_removal_effects, value_iteration

from bip.errors import CannotRemoveStart, DimensionMismatch, NoJourneys, NotAbsorbing, UnknownState
from bip.graph import JourneyInstance
from bip.markov import (
    LIFT_DISPLAY_CAP,
    AbsorbingChain,
    absorption_probabilities,
    candidate_filter,
    conversion_conditionals,
    expected_steps,
    fundamental_matrix,
    non_absorbing_states,
    remove_state,
    removal_effect,
    solve_absorption,
    start_absorption,
)


@st.composite
def absorbing_chains(draw) -> AbsorbingChain:
    """Random chains where every transient row leaks some mass to an absorbing state."""
    n = draw(st.integers(1, 5))
    m = draw(st.integers(1, 3))
    weights = st.floats(0.0, 1.0, allow_nan=False)
    Q = np.zeros((n, n))
    R = np.zeros((n, m))
    for i in range(n):
        q = np.array(draw(st.lists(weights, min_size=n, max_size=n)))
        r = np.array(draw(st.lists(weights, min_size=m, max_size=m)))
        r[draw(st.integers(0, m - 1))] += draw(st.floats(0.05, 1.0))
        total = q.sum() + r.sum()
        Q[i], R[i] = q / total, r / total
    return AbsorbingChain(tuple(f"s{i}" for i in range(n)), tuple(f"a{k}" for k in range(m)), Q, R)


def _journey(states: list[str], outcome: str, actor: str = "u") -> JourneyInstance:
    return JourneyInstance(actor, [(s, i) for i, s in enumerate(states)], outcome, "w", len(states))


def test_zero_q_gives_identity_and_unit_steps():
    chain = AbsorbingChain(("a", "b"), ("x",), np.zeros((2, 2)), np.ones((2, 1)))
    N = fundamental_matrix(chain)
    assert np.array_equal(N, np.eye(2))
    assert np.array_equal(expected_steps(N), np.ones(2))


def test_funnel_fundamental_entry(funnel_chain):
    N = fundamental_matrix(funnel_chain)
    assert N[0, 0] == pytest.approx(1 / 0.922, abs=1e-12)


def test_funnel_absorption_matches_exact_oracle(funnel_chain):
    B = solve_absorption(funnel_chain)
    conv = funnel_chain.absorbing_states.index("converted")
    exact = funnel_conversion()
    for s in FUNNEL_ORDER:
        assert B[funnel_chain.index(s), conv] == pytest.approx(float(exact[s]), abs=1e-12)
    assert np.allclose(B.sum(axis=1), 1.0, atol=1e-9)


def test_funnel_expected_steps(funnel_chain):
    t = expected_steps(fundamental_matrix(funnel_chain))
    exact = funnel_expected_steps()
    for s in FUNNEL_ORDER:
        assert t[funnel_chain.index(s)] == pytest.approx(float(exact[s]), abs=1e-12)
    assert t[funnel_chain.index("invite_teammate")] == 1.0


def test_funnel_removal_effects_and_ranking(funnel_chain):
    exact = funnel_removal_effects()
    got = {s: removal_effect(funnel_chain, "sign_up", s, "converted") for s in exact}
    for s, v in exact.items():
        assert got[s] == pytest.approx(float(v), abs=1e-12)
    assert sorted(got, key=got.get, reverse=True) == ["import_data", "feature_used", "invite_teammate"]


def test_pure_absorbing_row():
    chain = AbsorbingChain(("a",), ("x", "y"), np.zeros((1, 1)), np.array([[1.0, 0.0]]))
    assert solve_absorption(chain).tolist() == [[1.0, 0.0]]


def test_self_loop_only_state_is_not_absorbing():
    chain = AbsorbingChain(("a", "b"), ("x",), np.array([[0.0, 0.5], [0.0, 1.0]]), np.array([[0.5], [0.0]]))
    with pytest.raises(NotAbsorbing) as err:
        fundamental_matrix(chain)
    assert "b" in str(err.value)
    assert non_absorbing_states(chain) == ["b"]


def test_dimension_checks():
    with pytest.raises(DimensionMismatch):
        AbsorbingChain(("a",), ("x",), np.zeros((2, 2)), np.zeros((1, 1)))
    with pytest.raises(DimensionMismatch):
        absorption_probabilities(np.eye(2), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        AbsorbingChain(("a",), ("x",), np.array([[0.7]]), np.array([[0.7]]))


def test_removal_errors(funnel_chain):
    with pytest.raises(CannotRemoveStart):
        removal_effect(funnel_chain, "sign_up", "sign_up", "converted")
    with pytest.raises(UnknownState):
        removal_effect(funnel_chain, "sign_up", "checkout", "converted")
    with pytest.raises(UnknownState):
        removal_effect(funnel_chain, "sign_up", "import_data", "churned")


def test_removing_unreachable_state_is_neutral():
    Q = np.array([[0.0, 0.5, 0.0], [0.0, 0.0, 0.0], [0.0, 0.5, 0.0]])
    R = np.array([[0.3, 0.2], [0.6, 0.4], [0.1, 0.4]])
    chain = AbsorbingChain(("start", "mid", "orphan"), ("converted", "dropped_off"), Q, R)
    assert abs(removal_effect(chain, "start", "orphan", "converted")) <= 1e-12


def test_removal_routes_stranded_predecessor_to_dropoff():
    Q = np.array([[0.0, 1.0], [0.0, 0.0]])
    R = np.array([[0.0], [1.0]])
    chain = AbsorbingChain(("a", "b"), ("converted",), Q, R)
    reduced = remove_state(chain, "b")
    assert reduced.absorbing_states == ("converted", "dropped_off")
    assert reduced.R.tolist() == [[0.0, 1.0]]
    assert removal_effect(chain, "a", "b", "converted") == pytest.approx(1.0)


def test_weighted_start_mixes_rows(funnel_chain):
    B = solve_absorption(funnel_chain)
    mixed = start_absorption(funnel_chain, {"sign_up": 3.0, "feature_used": 1.0}, B)
    expect = 0.75 * B[0] + 0.25 * B[1]
    assert np.allclose(mixed, expect, atol=1e-15)


def test_conditionals_from_journeys():
    js = [
        _journey(["sign_up", "import_data"], "converted"),
        _journey(["sign_up", "import_data"], "dropped_off"),
        _journey(["sign_up"], "converted"),
        _journey(["sign_up"], "dropped_off"),
        _journey(["sign_up"], "dropped_off"),
        _journey(["sign_up"], "dropped_off"),
    ]
    c = conversion_conditionals(js, "import_data", "converted")
    assert (c.p_reached, c.p_not_reached, c.lift, c.status) == (0.5, 0.25, 2.0, "ok")


def test_conditionals_edge_cases():
    js = [_journey(["a", "b"], "converted"), _journey(["a"], "dropped_off")]
    assert conversion_conditionals(js, "a", "converted").status == "not_applicable"
    assert conversion_conditionals(js, "a", "converted").p_not_reached is None
    never = conversion_conditionals(js, "zzz", "converted")
    assert never.p_reached is None and never.status == "not_applicable"
    necessary = conversion_conditionals(js, "b", "converted")
    assert necessary.status == "necessary_for_conversion"
    assert necessary.lift is None and necessary.lift_display == LIFT_DISPLAY_CAP
    with pytest.raises(NoJourneys):
        conversion_conditionals([], "a", "converted")


def test_candidate_filter_threshold_and_override():
    js = ([_journey(["s", "x"], "converted")] * 3 + [_journey(["s", "x"], "dropped_off")]
          + [_journey(["s"], "converted")] + [_journey(["s"], "dropped_off")] * 3)
    ok = conversion_conditionals(js, "x", "converted")
    nec = conversion_conditionals([_journey(["s", "y"], "converted"), _journey(["s"], "dropped_off")], "y", "converted")
    assert ok.status == "ok" and nec.status == "necessary_for_conversion"
    conds = {"x": ok, "y": nec}
    assert candidate_filter(conds, {"x": 0.5, "y": 0.001}, tau_candidate=0.5) == ["x", "y"]
    assert candidate_filter(conds, {"x": 0.5, "y": 0.001}, tau_candidate=1e9) == ["y"]


@settings(max_examples=200, deadline=None)
@given(absorbing_chains())
def test_absorption_matches_value_iteration(chain):
    B = solve_absorption(chain)
    assert np.max(np.abs(B - value_iteration(chain.Q, chain.R))) <= 1e-9
    assert np.allclose(B.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(absorption_probabilities(fundamental_matrix(chain), chain.R), B, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(absorbing_chains(), st.data())
def test_removal_effect_bounded(chain, data):
    if len(chain.transient_states) < 2:
        return
    target = data.draw(st.sampled_from(chain.transient_states[1:]))
    outcome = chain.absorbing_states[0]
    effect = removal_effect(chain, chain.transient_states[0], target, outcome)
    assert -1.0 - 1e-9 <= effect <= 1.0 + 1e-9
    reduced = remove_state(chain, target)
    assert np.all(reduced.Q.sum(axis=1) + reduced.R.sum(axis=1) <= 1 + 1e-9)
