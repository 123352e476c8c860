class UniHashError(Exception):
    pass


class ConfigError(UniHashError, ValueError):
    """Invalid arguments or inconsistent configuration."""


class FormatError(UniHashError, ValueError):
    """Malformed feature file or checkpoint."""


class ShapeError(UniHashError, ValueError):
    pass


class CapabilityError(UniHashError, ValueError):
    """Requested construction is infeasible for the given sizes."""


class GenerationError(UniHashError, RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class NumericError(UniHashError, ArithmeticError):
    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class ProtocolError(UniHashError, ValueError):
    """Empty or otherwise unusable query/database set."""
