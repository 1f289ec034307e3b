"""Exception types shared across the package.

Plain ``ValueError`` is used for ordinary invalid arguments (shape
mismatches, out-of-range options). The classes here exist so the CLI can
map failure kinds onto distinct exit codes.
"""


class ConfigError(ValueError):
    """Bad configuration file or override: unknown key, wrong type, missing value."""


class DataFormatError(Exception):
    """Malformed binary input (dataset file, checkpoint, cache).

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateNumericsError(ArithmeticError):
    """Numerical degeneracy: zero-norm token, significantly negative eigenvalue."""


class IntegrationError(RuntimeError):
    """Velocity field violated its contract during ODE integration."""
