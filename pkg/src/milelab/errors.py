"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so each class carries its category name.
"""


class MileLabError(Exception):
    category = "error"


class DimensionError(MileLabError, ValueError):
    category = "dimension"


class NumericError(MileLabError, ArithmeticError):
    """A NaN/Inf appeared where finite values are required."""

    category = "numeric"


class ContractError(MileLabError, RuntimeError):
    category = "contract"


class InputError(MileLabError, ValueError):
    category = "input"


class DegenerateBatchError(InputError):
    category = "degenerate-batch"


class ConfigError(MileLabError, ValueError):
    category = "config"
