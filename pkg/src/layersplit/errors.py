"""Exception hierarchy shared across the package."""


class LayersplitError(Exception):
    """Base class for all errors raised by layersplit."""


class InvalidInputError(LayersplitError, ValueError):
    """An argument violates a documented precondition (shape, range, size)."""


class ConfigError(LayersplitError, ValueError):
    """A configuration value is invalid or cannot be satisfied."""


class CurationError(LayersplitError):
    """Dataset generation could not produce a valid sample."""


class NonFiniteError(LayersplitError, FloatingPointError):
    """A loss or activation became NaN/inf."""


class DivergenceError(LayersplitError):
    """Training loss exploded past the abort threshold."""


class CheckpointError(LayersplitError):
    """A checkpoint is malformed or does not match the loaded base model."""
