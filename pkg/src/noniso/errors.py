"""Exception hierarchy shared across the package."""


class NonisoError(Exception):
    """Base class for all package errors."""


class ValidationError(NonisoError, ValueError):
    """Structured input failed validation (skeletons, configs, file headers)."""

    def __init__(self, message, *, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(str(field))
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ParameterError(NonisoError, ValueError):
    """A numeric parameter lies outside its admissible range."""


class DegenerateMatrixError(NonisoError, ValueError):
    """A matrix cannot be normalised because its spectrum is flat."""


class FormatError(NonisoError, ValueError):
    """A binary file does not match its documented layout."""


class TrainingError(NonisoError, RuntimeError):
    """Training produced a non-finite loss or otherwise diverged."""
