"""Error taxonomy shared across modules; the CLI maps these to exit codes."""


class BidawareError(Exception):
    """Base class for package errors."""


class ConfigError(BidawareError):
    """A configuration value is invalid or inconsistent."""


class InputError(BidawareError):
    """An input artifact is missing, malformed, or mismatched."""


class InvariantError(BidawareError):
    """An internal invariant was violated."""
