"""Exception types shared across the package."""


class InvalidDimensionError(ValueError):
    """A matrix or vector has an unusable shape (mismatch, non-finite, not 2-D, ...)."""


class InvalidRankError(ValueError):
    """A requested decomposition rank is out of range for the given matrix."""


class InvalidBitsError(ValueError):
    """A bit-width is outside the supported set."""


class InvalidPartitionError(ValueError):
    """A block partition does not divide the matrix dimensions."""


class InvalidSpanError(ValueError):
    """A bit configuration does not cover a contiguous layer interval, or
    two queues slated for merging are not adjacent."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to converge within its iteration cap.

    Carries the last observed residual so callers can decide whether the
    partial answer is usable.
    """

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = float(residual)
