"""Exception types raised across the package."""


class RfcovError(Exception):
    """Base class for all package errors."""


class ValidationError(RfcovError, ValueError):
    """An argument or config violates a documented invariant."""


class PlacementError(RfcovError):
    """A transmitter would sit inside a building volume."""


class ShapeError(RfcovError, ValueError):
    """Tensor or grid shapes are incompatible."""


class DegenerateMaskError(RfcovError, ValueError):
    """A mask selects no elements."""


class FormatError(RfcovError):
    """A binary file is malformed; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(RfcovError):
    """Checkpoint contents do not match the model skeleton from its config."""


class SplitError(RfcovError):
    """A region split left one side empty."""
