"""Exception types shared across the package."""


class PLGFError(Exception):
    """Base class for every error raised by this package."""

    code = "plgf_error"


class RejectedInputError(PLGFError, ValueError):
    """Input data violates a precondition (shape, range, sign)."""

    code = "rejected_input"


class ConfigurationError(PLGFError, ValueError):
    """A configuration is internally inconsistent or incompatible with its input."""

    code = "configuration_error"


class DatasetLoadError(PLGFError):
    """A dataset directory could not be loaded.

    ``indices`` lists offending sample indices when the failure is per-sample.
    """

    code = "dataset_load_error"

    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = list(indices or [])


class CheckpointError(PLGFError):
    code = "checkpoint_error"


class NonFiniteLossError(PLGFError, FloatingPointError):
    """Training produced a NaN/inf loss. ``diagnostic`` holds epoch, batch and loss parts."""

    code = "non_finite_loss"

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = dict(diagnostic or {})
