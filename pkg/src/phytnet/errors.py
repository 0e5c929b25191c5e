"""Exception types shared across the package."""


class PhytNetError(Exception):
    pass


class ConfigurationError(PhytNetError, ValueError):
    """An architecture, layer or run configuration is invalid."""


class DataError(PhytNetError, ValueError):
    """Input data (labels, images, dataset layout) is invalid."""


class UsageError(PhytNetError, RuntimeError):
    """An API was called in a way its contract forbids."""


class NumericalError(PhytNetError, FloatingPointError):
    """A computation produced NaN/Inf or a factorization failed."""


class FoldError(PhytNetError, RuntimeError):
    """Training or evaluation of one cross-validation fold failed."""

    def __init__(self, fold: int, cause: Exception):
        super().__init__(f"fold {fold} failed: {cause!r}")
        self.fold = fold
        self.cause = cause
