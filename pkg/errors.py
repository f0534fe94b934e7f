"""
Error types
Every library module raises these; only cli.py turns them into exit codes.
"""


class SSPGError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SSPGError, ValueError):
    """Array shapes do not line up."""


class ContractError(SSPGError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(SSPGError, ArithmeticError):
    """Non-finite values showed up where finite ones are required."""

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = dict(payload or {})


class InsufficientSamplesError(ContractError):
    """Fewer than two samples per chain."""


class InsufficientChainsError(ContractError):
    """Fewer than two parallel chains."""


class DegenerateCovarianceError(NumericError):
    """Within-chain covariance is singular even after regularization."""

    def __init__(self, message, dims, payload=None):
        super().__init__(message, payload)
        self.dims = list(dims)


class ConfigError(SSPGError, ValueError):
    """Run config could not be parsed or validated."""

    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line


class CheckpointError(SSPGError):
    """Checkpoint unreadable or written by an incompatible version."""
