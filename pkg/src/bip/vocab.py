"""Closed predicate vocabulary and entity reference helpers."""

from __future__ import annotations

BASE_PREDICATES = frozenset({
    "transitions_to",
    "increases_probability_of",
    "is_activation_driver_for",
    "is_dropoff_point_for",
    "diverges_from",
    "regressed_after",
    "changed_after",
    "associated_with",
    "more_common_in",
    "less_common_in",
    "necessary_for_conversion",
    "is_fast_path_to",
})

# Registered extensions: the loop detector and path optimization targets
# have no predicate in the base set.
EXTENSION_PREDICATES = frozenset({"exhibits_loop", "is_optimization_target"})

# Never registrable: the store only holds associations.
CAUSAL_PREDICATES = frozenset({"causes", "leads_to", "caused_by", "drives"})


def ref(kind: str, ident: str) -> str:
    return f"{kind}:{ident}"


def state_ref(state: str) -> str:
    return ref("state", state)


def outcome_ref(outcome: str) -> str:
    return ref("outcome", outcome)


def split_ref(entity: str) -> tuple[str, str]:
    kind, _, ident = entity.partition(":")
    return kind, ident


def is_hub(entity: str) -> bool:
    """Outcome entities touch nearly every fact and are not expanded through."""
    return entity.startswith("outcome:")
