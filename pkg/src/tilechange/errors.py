"""Exception hierarchy shared across the package.

Every error raised by library code derives from TileChangeError so callers
(and the CLI) can distinguish usage/validation problems from numerical
failures during training.
"""


class TileChangeError(Exception):
    """Base class for all package errors."""


class FormatError(TileChangeError):
    """A scene, checkpoint, or report file is missing, corrupt, or inconsistent."""


class ShapeError(TileChangeError):
    """Array shapes do not conform to an operation's contract."""


class DomainError(TileChangeError):
    """An argument is outside an operation's domain (empty input, bad range)."""


class EmptyGridError(DomainError):
    """A scene is smaller than a single tile."""


class PairingError(TileChangeError):
    """Tile grids or labeled score sets cannot be paired (mismatched geometry)."""


class DegenerateError(TileChangeError):
    """A statistic or fit is undefined for the given data (zero spread,
    zero vector, constant band, exhausted bootstrap redraws)."""


class CheckpointError(TileChangeError):
    """A checkpoint file is corrupt or incompatible with the requested use."""


class DivergenceError(TileChangeError):
    """Training produced a non-finite loss or gradient.

    Carries whatever loss history was recorded before the abort.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class PlacementError(TileChangeError):
    """Synthetic burn regions cannot be placed within the prevalence budget."""
