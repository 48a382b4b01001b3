"""Exception and warning types shared across the package."""


class ParseError(ValueError):
    """A raw input row could not be parsed.

    The message names the 1-based line number when one is known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(ValueError):
    """Parsed data violates a dataset invariant (e.g. rating out of range)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite parameter; names the offending epoch."""

    def __init__(self, epoch: int):
        super().__init__(f"non-finite model parameter detected after epoch {epoch}")
        self.epoch = epoch


class EvaluationError(RuntimeError):
    """A benchmark stage failed; names the method and fold/run that broke."""


class DataWarning(UserWarning):
    """Input data is usable but surprising (empty genre sets, missing years, ...)."""
