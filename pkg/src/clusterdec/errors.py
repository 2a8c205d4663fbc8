"""Exception types shared across the simulator."""


class SimulationError(Exception):
    """Base class for all simulator errors."""


class InvalidClusterSize(SimulationError):
    """Cluster size is not a power of two in [1, 16]."""


class SmemOverflow(SimulationError):
    """A shared-memory allocation would exceed the per-block capacity."""


class ShapeMismatch(SimulationError):
    """Tensor or buffer shapes are inconsistent with the operation."""


class BufferError(SimulationError):
    """A named buffer is missing, duplicated, or mis-sized."""


class OutOfBounds(SimulationError):
    """A global-memory access falls outside the target tensor."""


class DimensionError(SimulationError):
    """Model dimensions violate a partitioning constraint."""


class FixtureError(SimulationError):
    """A calibration fixture file is malformed or degenerate."""
