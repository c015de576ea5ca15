"""Absorbing Markov chain mathematics over journey snapshots.

All inversions go through a dense LU factorization of ``I - Q``; the
fundamental matrix and the absorption matrix share one factorization.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from bip.errors import CannotRemoveStart, DimensionMismatch, NoJourneys, NotAbsorbing, UnknownState
from bip.graph import GraphSnapshot, JourneyInstance

LIFT_DISPLAY_CAP = 999.0
ROW_TOL = 1e-9


@dataclass(frozen=True)
class AbsorbingChain:
    transient_states: tuple[str, ...]
    absorbing_states: tuple[str, ...]
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self) -> None:
        Q = np.asarray(self.Q, dtype=float)
        R = np.asarray(self.R, dtype=float)
        n, m = len(self.transient_states), len(self.absorbing_states)
        if Q.shape != (n, n) or R.shape != (n, m):
            raise DimensionMismatch(f"Q {Q.shape} / R {R.shape} do not match {n} transient x {m} absorbing")
        if (Q < 0).any() or (R < 0).any():
            raise ValueError("transition probabilities must be non-negative")
        if ((Q.sum(axis=1) + R.sum(axis=1)) > 1 + ROW_TOL).any():
            raise ValueError("a transition row sums to more than 1")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "transient_states", tuple(self.transient_states))
        object.__setattr__(self, "absorbing_states", tuple(self.absorbing_states))

    @classmethod
    def from_snapshot(cls, snap: GraphSnapshot) -> AbsorbingChain:
        return cls(snap.states, snap.absorbing, np.array(snap.Q), np.array(snap.R))

    def index(self, state: str) -> int:
        try:
            return self.transient_states.index(state)
        except ValueError:
            raise UnknownState(state) from None


def non_absorbing_states(chain: AbsorbingChain) -> list[str]:
    """Transient states with no path to an exit.

    An exit is an absorbing state or a row with missing mass (a state never
    observed leaving, e.g. only at the end of censored journeys).
    """
    Q, R = chain.Q, chain.R
    n = len(chain.transient_states)
    exits = (R.sum(axis=1) > 0) | (Q.sum(axis=1) + R.sum(axis=1) < 1 - ROW_TOL)
    ok = set(np.flatnonzero(exits).tolist())
    frontier = list(ok)
    preds = [np.flatnonzero(Q[:, j] > 0).tolist() for j in range(n)]
    while frontier:
        j = frontier.pop()
        for i in preds[j]:
            if i not in ok:
                ok.add(i)
                frontier.append(i)
    return [chain.transient_states[i] for i in range(n) if i not in ok]


def _factor(chain: AbsorbingChain):
    bad = non_absorbing_states(chain)
    if bad:
        raise NotAbsorbing(bad)
    n = len(chain.transient_states)
    return lu_factor(np.eye(n) - chain.Q)


def fundamental_matrix(chain: AbsorbingChain) -> np.ndarray:
    """``N = (I - Q)^-1`` via LU solve; raises ``NotAbsorbing`` on closed transient classes."""
    n = len(chain.transient_states)
    if n == 0:
        return np.zeros((0, 0))
    return lu_solve(_factor(chain), np.eye(n))


def absorption_probabilities(N: np.ndarray, R: np.ndarray) -> np.ndarray:
    N = np.asarray(N, dtype=float)
    R = np.asarray(R, dtype=float)
    if N.ndim != 2 or N.shape[0] != N.shape[1] or N.shape[1] != R.shape[0]:
        raise DimensionMismatch(f"cannot multiply N {N.shape} by R {R.shape}")
    return N @ R


def solve_absorption(chain: AbsorbingChain) -> np.ndarray:
    """``B`` from ``(I - Q) B = R`` without forming the inverse."""
    if not chain.transient_states:
        return np.zeros((0, len(chain.absorbing_states)))
    return lu_solve(_factor(chain), chain.R)


def expected_steps(N: np.ndarray) -> np.ndarray:
    return np.asarray(N, dtype=float).sum(axis=1)


# -- empirical conditionals ------------------------------------------------


@dataclass(frozen=True)
class Conditionals:
    """Conversion rates among journeys that did / did not reach a state.

    ``status`` is ``"ok"``, ``"necessary_for_conversion"`` (no conversions
    without the state) or ``"not_applicable"`` (an empty conditioning set).
    Missing rates are ``None``.
    """

    p_reached: float | None
    p_not_reached: float | None
    lift: float | None
    status: str
    n_reached: int
    n_not_reached: int
    successes_reached: int
    successes_not_reached: int

    @property
    def lift_display(self) -> float | None:
        if self.status == "necessary_for_conversion":
            return LIFT_DISPLAY_CAP
        if self.lift is None:
            return None
        return min(self.lift, LIFT_DISPLAY_CAP)


def _conditionals_from_counts(n: int, n_r: int, k_r: int, k_total: int) -> Conditionals:
    n_nr = n - n_r
    k_nr = k_total - k_r
    p_r = k_r / n_r if n_r else None
    p_nr = k_nr / n_nr if n_nr else None
    if p_r is None or p_nr is None:
        return Conditionals(p_r, p_nr, None, "not_applicable", n_r, n_nr, k_r, k_nr)
    if p_nr == 0:
        status = "necessary_for_conversion" if p_r > 0 else "not_applicable"
        return Conditionals(p_r, p_nr, None, status, n_r, n_nr, k_r, k_nr)
    return Conditionals(p_r, p_nr, p_r / p_nr, "ok", n_r, n_nr, k_r, k_nr)


def conversion_conditionals(journeys: Sequence[JourneyInstance], state: str, outcome: str) -> Conditionals:
    """P(outcome | reached(state)), P(outcome | not reached(state)) and their ratio over journeys."""
    if not journeys:
        raise NoJourneys("conditionals need at least one journey")
    n_r = k_r = k_total = 0
    for j in journeys:
        hit = j.outcome == outcome
        k_total += hit
        if state in j.states:
            n_r += 1
            k_r += hit
    return _conditionals_from_counts(len(journeys), n_r, k_r, k_total)


def snapshot_conditionals(snap: GraphSnapshot, state: str, outcome: str) -> Conditionals:
    """Same quantities as :func:`conversion_conditionals`, from snapshot statistics."""
    if snap.n_journeys == 0:
        raise NoJourneys("empty snapshot")
    st = snap.state_stats.get(state)
    n_r = st.reached if st else 0
    k_r = st.reached_by_outcome.get(outcome, 0) if st else 0
    return _conditionals_from_counts(snap.n_journeys, n_r, k_r, snap.outcome_counts.get(outcome, 0))


# -- removal effect --------------------------------------------------------


def _start_weights(chain: AbsorbingChain, start: str | Mapping[str, float]) -> dict[str, float]:
    if isinstance(start, str):
        return {start: 1.0}
    total = math.fsum(start.values())
    return {s: w / total for s, w in sorted(start.items()) if w > 0}


def start_absorption(chain: AbsorbingChain, start: str | Mapping[str, float], B: np.ndarray | None = None):
    """Absorption row for a start state, or the weighted mix over several start states."""
    if B is None:
        B = solve_absorption(chain)
    row = np.zeros(len(chain.absorbing_states))
    for s, w in _start_weights(chain, start).items():
        row = row + w * B[chain.index(s)]
    return row


def remove_state(chain: AbsorbingChain, state: str, dropoff_outcome: str = "dropped_off") -> AbsorbingChain:
    """Delete *state* and renormalize the outgoing mass of its predecessors.

    A predecessor left with no mass, or a state left without any path to an
    exit, routes everything to *dropoff_outcome*.
    """
    k = chain.index(state)
    keep = [i for i in range(len(chain.transient_states)) if i != k]
    preds = set(np.flatnonzero(chain.Q[:, k] > 0).tolist()) - {k}
    Q = chain.Q[np.ix_(keep, keep)].copy()
    R = chain.R[keep].copy()
    absorbing = chain.absorbing_states
    if dropoff_outcome in absorbing:
        d = absorbing.index(dropoff_outcome)
    else:
        absorbing = absorbing + (dropoff_outcome,)
        R = np.hstack([R, np.zeros((len(keep), 1))])
        d = len(absorbing) - 1
    for new_i, old_i in enumerate(keep):
        if old_i not in preds:
            continue
        mass = Q[new_i].sum() + R[new_i].sum()
        if mass > 0:
            Q[new_i] /= mass
            R[new_i] /= mass
        else:
            R[new_i, d] = 1.0
    reduced = AbsorbingChain(tuple(chain.transient_states[i] for i in keep), absorbing, Q, R)
    stuck = non_absorbing_states(reduced)
    if stuck:
        for s in stuck:
            i = reduced.index(s)
            Q[i] = 0.0
            R[i] = 0.0
            R[i, d] = 1.0
        reduced = AbsorbingChain(reduced.transient_states, absorbing, Q, R)
    return reduced


def removal_effect(
    chain: AbsorbingChain,
    start: str | Mapping[str, float],
    state: str,
    outcome: str,
    dropoff_outcome: str = "dropped_off",
) -> float:
    """Drop in the start state's absorption probability into *outcome* once *state* is removed."""
    weights = _start_weights(chain, start)
    if state in weights:
        raise CannotRemoveStart(f"cannot remove start state {state!r}")
    chain.index(state)
    if outcome not in chain.absorbing_states:
        raise UnknownState(outcome)
    t = chain.absorbing_states.index(outcome)
    before = start_absorption(chain, weights)[t]
    reduced = remove_state(chain, state, dropoff_outcome)
    after = start_absorption(reduced, weights)[reduced.absorbing_states.index(outcome)]
    return float(before - after)


def candidate_filter(
    conditionals: Mapping[str, Conditionals],
    reach: Mapping[str, float],
    tau_candidate: float,
) -> list[str]:
    """States with reach x lift x sample size above the threshold; necessary states always pass."""
    out = []
    for s in sorted(conditionals):
        c = conditionals[s]
        if c.status == "necessary_for_conversion":
            out.append(s)
        elif c.lift is not None and reach.get(s, 0.0) * c.lift * c.n_reached > tau_candidate:
            out.append(s)
    return out


# -- metrics bundle --------------------------------------------------------


@dataclass(frozen=True)
class ChainMetrics:
    snapshot_id: str
    chain: AbsorbingChain
    N: np.ndarray
    B: np.ndarray
    expected_steps: np.ndarray
    conditionals: Mapping[str, Mapping[str, Conditionals]]
    start: Mapping[str, float]

    def b(self, state: str, outcome: str) -> float:
        return float(self.B[self.chain.index(state), self.chain.absorbing_states.index(outcome)])

    def to_dict(self) -> dict[str, Any]:
        return {
            "snapshot_id": self.snapshot_id,
            "states": list(self.chain.transient_states),
            "absorbing": list(self.chain.absorbing_states),
            "N": self.N.tolist(),
            "B": self.B.tolist(),
            "expected_steps": self.expected_steps.tolist(),
            "start": dict(self.start),
            "conditionals": {
                s: {o: _cond_dict(c) for o, c in per.items()} for s, per in self.conditionals.items()
            },
        }


def _cond_dict(c: Conditionals) -> dict[str, Any]:
    return {
        "p_reached": c.p_reached,
        "p_not_reached": c.p_not_reached,
        "lift": c.lift,
        "status": c.status,
        "n_reached": c.n_reached,
        "n_not_reached": c.n_not_reached,
    }


def compute_metrics(snap: GraphSnapshot) -> ChainMetrics:
    chain = AbsorbingChain.from_snapshot(snap)
    lu = _factor(chain)
    n = len(chain.transient_states)
    N = lu_solve(lu, np.eye(n))
    B = lu_solve(lu, chain.R)
    conds = {
        s: {o: snapshot_conditionals(snap, s, o) for o in chain.absorbing_states}
        for s in chain.transient_states
    }
    return ChainMetrics(snap.snapshot_id, chain, N, B, expected_steps(N), conds, snap.start_distribution())
