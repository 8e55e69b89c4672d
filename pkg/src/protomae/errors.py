"""Error taxonomy shared by every module.

Four failure classes, kept distinguishable so callers (and the CLI exit-code
mapping) can react without string matching:

* ``InvalidArgument``  -- a caller violated an operation's precondition.
* ``NumericError``     -- a non-finite value or other arithmetic breakdown.
* ``InvariantViolation`` -- internal state that should be impossible.
* ``ConfigError``      -- malformed or inconsistent run configuration.
"""


class InvalidArgument(ValueError):
    """A precondition on an operation's inputs was violated."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or an otherwise unusable number."""


class InvariantViolation(RuntimeError):
    """An internal consistency check failed; indicates a bug, not bad input."""


class ConfigError(ValueError):
    """A run configuration is malformed, unknown, or self-contradictory."""
