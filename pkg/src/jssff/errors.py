"""Exception hierarchy shared by every jssff module."""


class JssffError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(JssffError, ValueError):
    """Malformed input file (NetPBM header, payload, ...)."""


class ParameterError(JssffError, ValueError):
    """An argument is outside its legal range."""


class ShapeError(JssffError, ValueError):
    """Array dimensions do not match what an operation expects."""


class ConfigError(JssffError, ValueError):
    """Inconsistent model or experiment configuration."""


class DataError(JssffError, ValueError):
    """Dataset content violates an ingestion or training precondition."""


class ParseError(DataError):
    """Dataset JSON does not follow the expected schema.

    ``path`` is a JSON-path-like locator of the offending node.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class PersistenceError(JssffError):
    """Checkpoint or archive file is corrupt, truncated, or incompatible."""


class ContractViolation(JssffError, RuntimeError):
    """Internal contract broken (non-finite values, stale caches, ...)."""
