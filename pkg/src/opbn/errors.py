"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match an operation's contract."""


class ContractError(RuntimeError):
    """An API precondition was violated (stale tape, untrained masks, ...)."""


class DataError(ValueError):
    """A dataset, file, or metadata table is malformed or missing fields."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class ConfigError(ValueError):
    """A run configuration key is unknown or violates its constraint."""


class TrainingError(RuntimeError):
    """Training aborted; diagnostics and last-good checkpoint noted in args."""
