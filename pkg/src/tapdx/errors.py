"""Exception hierarchy. The CLI maps these onto exit codes:
data problems -> 1, config problems -> 2, numerical failures -> 3."""


class TapdxError(Exception):
    """Base class for all package errors."""


class DataError(TapdxError):
    """Malformed or inconsistent input data (exit code 1)."""


class ConfigError(TapdxError):
    """Bad run configuration (exit code 2)."""


class NumericalError(TapdxError):
    """A numerical routine failed to produce a usable result (exit code 3)."""


# --- ingest ---------------------------------------------------------------

class MissingColumn(DataError):
    pass


class NonNumericSample(DataError):
    pass


class UnequalChannelLengths(DataError):
    pass


class UnknownLabel(DataError):
    pass


class EmptySignal(DataError):
    """Fewer samples than the minimum every downstream feature needs."""


class ConflictingLabel(DataError):
    pass


class DuplicateTrial(DataError):
    pass


class TooManyTrials(DataError):
    pass


# --- kinematics / features ------------------------------------------------

class SeriesTooShort(DataError):
    pass


class LengthMismatch(DataError):
    pass


# --- selection ------------------------------------------------------------

class TooFewGroups(DataError):
    pass


class DegenerateGroups(NumericalError):
    """Zero within-group variance; the F statistic is undefined."""


class RankDeficient(NumericalError):
    pass


class ObjectiveFailure(NumericalError):
    pass


# --- classify -------------------------------------------------------------

class SolverNonconvergence(NumericalError):
    """SMO hit its kernel-evaluation cap. Carries the best iterate found."""

    def __init__(self, message, best_state=None):
        super().__init__(message)
        self.best_state = best_state


class FeatureMismatch(DataError):
    pass


class ClassMissingInFold(DataError):
    pass
