"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shape or embedding length outside the valid range."""


class NumericError(ValueError):
    """Non-finite or numerically inconsistent input."""


class DegenerateComponentError(ValueError):
    """A spectral component with (near-)zero energy was selected."""


class VerticalityError(ValueError):
    """Recurrence extraction failed: the retained subspace is vertical."""


class DegenerateLinearizationError(ValueError):
    """Linearization point coincides with the forecast obstacle center."""


class InsufficientDataError(ValueError):
    """Not enough samples (or ensemble members) for the requested operation."""
