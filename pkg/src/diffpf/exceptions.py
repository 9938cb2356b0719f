"""Exception hierarchy shared across the package."""


class DPFError(Exception):
    """Base class for all errors raised by diffpf."""


class ShapeError(DPFError, ValueError):
    """An operation received inputs with incompatible shapes."""

    def __init__(self, node: str, detail: str):
        self.node = node
        super().__init__(f"[{node}] {detail}")


class UsageError(DPFError, RuntimeError):
    """An API was called in the wrong order or mode."""


class NumericError(DPFError, FloatingPointError):
    """A loss, gradient or parameter became non-finite."""


class DataError(DPFError, ValueError):
    """A dataset, checkpoint or maze description is invalid."""


class DegenerateScaleError(DataError):
    """The training data has no motion to derive a state scale from."""
