class DimensionError(ValueError):
    """Array shapes do not fit together."""


class ContractError(ValueError):
    """An input violates an operation's precondition."""


class ConfigError(ValueError):
    """Invalid experiment or initialisation settings."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class InputError(ValueError):
    """Model input outside its domain (e.g. an out-of-vocabulary token)."""


class CheckpointError(ValueError):
    """A checkpoint directory is missing, malformed or does not match."""
