"""Exception taxonomy shared across the package."""


class TsbdError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(TsbdError, ValueError):
    """Operands have incompatible shapes."""


class DomainError(TsbdError, ValueError):
    """A value lies outside an operation's accepted domain."""


class FormatError(TsbdError, ValueError):
    """A binary artifact file is malformed."""


class DivergenceError(TsbdError, RuntimeError):
    """An optimization loop produced a non-finite loss or gradient."""


class ConfigError(TsbdError, ValueError):
    """An experiment configuration is missing, malformed, or inconsistent."""


class MissingArtifactError(TsbdError, FileNotFoundError):
    """A required input artifact file is absent."""
