"""Exception taxonomy shared across the package.

CLI exit codes map onto these: ConfigError -> 2, SingularityError and
NumericError -> 3, I/O problems (OSError) -> 4.
"""


class FlowDiffError(Exception):
    """Base class for package errors."""


class ConfigError(FlowDiffError):
    """Invalid configuration: unknown kind, bad value, schema violation."""


class SingularityError(FlowDiffError):
    """A transformation is not invertible at the requested point (zero scale)."""


class NumericError(FlowDiffError):
    """Non-finite values encountered during training or integration."""


class UnsupportedModelError(FlowDiffError):
    """Operation not supported for this model configuration (e.g. plots need D=2)."""
