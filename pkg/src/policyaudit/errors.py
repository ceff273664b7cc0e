"""Exception types raised across the pipeline."""

from __future__ import annotations


class AuditError(Exception):
    """Base class for every error raised by policyaudit."""


# cohort ---------------------------------------------------------------------

class MissingFileError(AuditError, FileNotFoundError):
    pass


class SchemaMismatchError(AuditError):
    pass


class MalformedRecordError(AuditError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class NonMonotoneTimeError(AuditError):
    def __init__(self, patient_id: str, detail: str = ""):
        msg = f"patient {patient_id!r}: time_index must increase by exactly 1"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.patient_id = patient_id


class EmptyCohortError(AuditError):
    pass


class TooFewTrajectoriesError(AuditError):
    pass


# discretize -----------------------------------------------------------------

class TooFewPointsError(AuditError):
    pass


class InvalidEdgesError(AuditError):
    def __init__(self, axis: str, reason: str):
        super().__init__(f"{axis} axis: {reason}")
        self.axis = axis


class DimensionMismatchError(AuditError):
    pass


class NonFiniteInputError(AuditError):
    pass


class NegativeDoseError(AuditError):
    pass


class NonFiniteDoseError(AuditError):
    pass


# mdp / solver / ope / rollout -----------------------------------------------

class EmptyDatasetError(AuditError):
    pass


class IndexOutOfRangeError(AuditError, IndexError):
    pass


class NoAllowedActionError(AuditError):
    def __init__(self, states):
        self.states = list(states)
        shown = ", ".join(str(s) for s in self.states[:20])
        more = "" if len(self.states) <= 20 else f" (+{len(self.states) - 20} more)"
        super().__init__(f"states with no allowed action: {shown}{more}")


class UnobservedSupportError(AuditError):
    def __init__(self, state: int, action: int):
        super().__init__(
            f"policy puts mass on unobserved pair (state={state}, action={action})"
        )
        self.state = state
        self.action = action


class NoOverlapError(AuditError):
    """All importance weights are zero: the target policy is not supported by the data."""


class ZeroBehaviorProbError(AuditError):
    def __init__(self, state: int, action: int):
        super().__init__(
            f"behavior policy gives zero probability to observed (state={state}, action={action})"
        )
        self.state = state
        self.action = action


class SingularSystemError(AuditError):
    pass


class InvalidConfigError(AuditError, ValueError):
    pass


# insight --------------------------------------------------------------------

class SingleClassTargetError(AuditError):
    pass


class FeatureMismatchError(AuditError):
    pass


class ZeroDenominatorError(AuditError, ZeroDivisionError):
    pass


# cli ------------------------------------------------------------------------

class ConfigError(AuditError):
    exit_code = 1


class MissingArtifactError(AuditError):
    exit_code = 2


class HashMismatchError(AuditError):
    exit_code = 3
