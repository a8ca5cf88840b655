"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PeerAssignError(Exception):
    exit_code = 1


class ValidationError(PeerAssignError, ValueError):
    """Input violates a documented invariant."""

    exit_code = 2


class ParseError(ValidationError):
    """Malformed input file."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class ConfigError(ValidationError):
    pass


class InfeasibleError(ValidationError):
    """No assignment satisfies the gender-band constraint."""


class NumericError(PeerAssignError, ArithmeticError):
    exit_code = 3


class SingularityError(NumericError):
    pass


class TrainingError(NumericError):
    pass


class EstimationError(NumericError):
    pass


class RankError(EstimationError):
    pass


class WeakInstrumentError(EstimationError):
    pass


class StageError(PeerAssignError, OSError):
    """A pipeline stage could not find or write an artifact."""

    exit_code = 4
