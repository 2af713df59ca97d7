"""Exception hierarchy shared across the package."""


class StableflowError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(StableflowError):
    """Input violates a documented precondition (bad shapes, counts, flags)."""


class InvalidParameterError(ValidationError):
    """Policy parameter block is malformed (non-finite entries, bad shape)."""


class ObservationShapeError(ValidationError):
    """Observation payload does not match what the weight network expects."""


class ParseError(StableflowError):
    """A file could not be parsed. Carries location context when available."""

    def __init__(self, message, *, path=None, field=None, line=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.path = path
        self.field = field
        self.line = line


class UnsupportedVersionError(ParseError):
    """Checkpoint or dataset file has a version this build cannot migrate."""


class NumericalFailureError(StableflowError):
    """A numerical routine failed to converge or produced non-finite values."""

    def __init__(self, message, *, system_index=None):
        if system_index is not None:
            message = f"{message} (system {system_index})"
        super().__init__(message)
        self.system_index = system_index


class ContractError(StableflowError):
    """An internal API contract was violated (e.g. non-scalar loss node)."""


class TrainingDivergedError(StableflowError):
    """Training produced a non-finite loss."""

    def __init__(self, message, *, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class RolloutDivergedError(StableflowError):
    """Integration produced a non-finite state."""

    def __init__(self, message, *, step):
        super().__init__(f"{message} (step {step})")
        self.step = step
