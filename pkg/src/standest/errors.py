"""Exception hierarchy shared across the package.

Every failure mode maps to one of four categories so the CLI can translate
them into stable exit codes (config 2, data 3, numerical 4).
"""


class StandestError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(StandestError):
    """Invalid run configuration (missing keys, bad schedule, unknown model)."""


class ValidationError(StandestError):
    """Malformed input data: bad file schema, invariant-violating records."""


class DomainError(StandestError):
    """Argument outside a function's mathematical domain."""


class NumericalError(StandestError):
    """Linear-algebra failure that persists after the jitter ladder."""
