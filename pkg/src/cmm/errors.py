"""Exception hierarchy shared across the package."""


class CmmError(Exception):
    """Base class for all package errors."""


class SchemaError(CmmError):
    """Shape, vocabulary, or pair-set mismatch between inputs."""


class NumericError(CmmError):
    """Non-finite value where a finite one is required."""


class GenerationError(CmmError):
    """Synthetic-data configuration that cannot be realized."""


class ConfigError(CmmError):
    """Invalid experiment or CLI configuration."""
