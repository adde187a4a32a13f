"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class ParseError(ValidationError):
    """A record in an input file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(ValueError):
    """A persisted artifact is corrupt, truncated, or from an incompatible version."""


class ContentTooLongError(ValidationError):
    """The URL segment alone cannot fit in the token budget."""


class TrainingError(RuntimeError):
    """Optimization produced a non-finite value."""


class MissingArtifactError(FileNotFoundError):
    """A pipeline stage needs an artifact that has not been produced yet."""


class StaleArtifactError(RuntimeError):
    """An upstream artifact was produced under a different configuration."""
