"""Exception types shared across the package."""


class FedMAError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FedMAError, ValueError):
    """Array or layer extents do not line up."""


class NumericalInstabilityError(FedMAError, ArithmeticError):
    """A loss or gradient became NaN or infinite."""


class DivergenceError(FedMAError, ArithmeticError):
    """Training loss exceeded the divergence threshold."""

    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss:.4g})")
        self.epoch = epoch
        self.loss = loss


class EmptyDatasetError(FedMAError, ValueError):
    """An operation that needs examples got none."""


class NoNeuronsError(FedMAError, TypeError):
    """A parameter-free layer was asked for its neurons."""


class ConfigError(FedMAError, ValueError):
    """Invalid experiment or algorithm configuration."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class FormatError(FedMAError, ValueError):
    """A binary or text file does not follow its expected layout."""
