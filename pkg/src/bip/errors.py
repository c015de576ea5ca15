"""Exception hierarchy.

Input errors map to CLI exit code 1, computation errors to 2 and
external-client errors to 3.
"""

from __future__ import annotations


class BipError(Exception):
    exit_code = 2


class InputError(BipError):
    exit_code = 1


class ComputationError(BipError):
    exit_code = 2


class ExternalClientError(BipError):
    exit_code = 3


# domain / config
class ConfigError(InputError):
    pass


class UnknownState(InputError):
    def __init__(self, state_id: str):
        super().__init__(f"unknown state: {state_id!r}")
        self.state_id = state_id


class OverlappingStartTerminal(InputError):
    pass


class EmptyTerminalMap(InputError):
    pass


class TypeMismatch(InputError):
    pass


class NonPositiveLength(InputError):
    pass


# graph / markov
class EmptySnapshot(ComputationError):
    pass


class NotAbsorbing(ComputationError):
    def __init__(self, states: list[str]):
        super().__init__(f"no path to absorption from: {', '.join(states)}")
        self.states = list(states)


class DimensionMismatch(ComputationError):
    pass


class CannotRemoveStart(ComputationError):
    pass


class NoJourneys(ComputationError):
    pass


# stats / detectors
class NotNormalized(ComputationError):
    pass


class WindowMismatch(ComputationError):
    pass


class CycleDetected(ComputationError):
    pass


class MissingComponent(ComputationError):
    pass


# knowledge graph
class UnknownPredicate(InputError):
    pass


class MissingProvenance(InputError):
    pass


# language layer
class NoFacts(ComputationError):
    pass


class UnvalidatedBundle(ComputationError):
    pass


class NoRelevantFacts(ComputationError):
    pass


class GenerationFailed(ExternalClientError):
    pass


# app shell
class InvalidChain(InputError):
    pass


class MissingArtifact(InputError):
    pass


class StageError(BipError):
    """Wraps a stage failure with its pipeline stage label."""

    def __init__(self, stage: int, name: str, cause: BipError):
        super().__init__(f"stage {stage} ({name}): {cause}")
        self.stage = stage
        self.name = name
        self.cause = cause
        self.exit_code = cause.exit_code
