"""Exception types shared across the package."""


class IcsidError(Exception):
    """Base class for all icsid errors."""


class DimensionError(IcsidError):
    """Tensor/array shapes are incompatible with an operation."""


class ConfigError(IcsidError):
    """Invalid configuration value or unknown configuration key."""


class ValidationError(IcsidError):
    """Runtime input failed a precondition (non-finite values, bad poles, ...)."""


class SamplingError(IcsidError):
    """System sampling exhausted its retry budget."""


class SimulationError(IcsidError):
    """A simulation produced non-finite values; the message names the stage."""


class FormatError(IcsidError):
    """A serialized artifact is corrupt, truncated, or of the wrong version."""


class NumericError(IcsidError):
    """A numeric reduction encountered non-finite inputs."""


class GradCheckError(IcsidError):
    """Finite differencing produced a non-finite loss; names the parameter."""


class CompatibilityError(IcsidError):
    """Checkpoint, test set, and configuration do not fit together."""
