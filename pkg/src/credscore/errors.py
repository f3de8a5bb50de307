"""Exception types shared across the package.

Every error raised on a contract violation derives from CredScoreError so
callers (and the CLI) can map failures to exit codes without string matching.
"""


class CredScoreError(Exception):
    """Base class for all package errors."""


class ConfigError(CredScoreError):
    """Invalid configuration: bad ranges, impossible splits, unknown options."""


class SchemaError(CredScoreError):
    """Input data does not match the expected schema (columns, feature counts)."""


class IntegrityError(CredScoreError):
    """Structurally valid data that violates an integrity rule (e.g. duplicate ids)."""


class NumericalError(CredScoreError):
    """Non-finite or diverging values encountered during numerical routines."""


class UndefinedMetricError(CredScoreError):
    """A metric was requested on data where it is mathematically undefined."""


class NotFoundError(CredScoreError):
    """A requested entity (case id, model artifact) does not exist."""


class StageError(CredScoreError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
