"""Exception types shared across the package.

The CLI maps each family onto a process exit code.
"""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, domain, sign)."""


class StaleTapeError(RuntimeError):
    """A differentiation record was replayed after its parameters changed."""


class ConfigError(ValueError):
    """Invalid run or generator configuration (exit code 2)."""


class FormatError(ValueError):
    """On-disk dataset, checkpoint or prediction file is malformed (exit code 3)."""


class NumericError(FloatingPointError):
    """Non-finite loss or gradient encountered during training (exit code 4)."""
