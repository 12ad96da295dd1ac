"""Exception types shared across the package."""


class DebiasError(Exception):
    """Base class for all package errors."""


class ConfigError(DebiasError, ValueError):
    """Invalid configuration value; ``key`` names the offending entry."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class ShapeError(DebiasError, ValueError):
    pass


class AdapterShapeError(ShapeError):
    pass


class VocabError(DebiasError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown condition"


class StaleTapeError(DebiasError, RuntimeError):
    pass


class IndicatorError(DebiasError, ValueError):
    pass


class IncompleteAdapterError(DebiasError, ValueError):
    pass


class IncongruentBanksError(DebiasError, ValueError):
    pass


class RevokedViewError(DebiasError, RuntimeError):
    pass


class NumericalDivergenceError(DebiasError, FloatingPointError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)


class ArtifactMismatchError(DebiasError):
    """Checkpoint/bank incompatibility or integrity failure."""
