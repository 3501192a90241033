"""Exception hierarchy shared across the package.

The CLI maps these to distinct exit codes, so keep the split between
configuration, data, and numerical-health errors intact.
"""


class EvoEditError(Exception):
    """Base class for all package errors."""


class ConfigError(EvoEditError):
    """Invalid configuration value or incompatible run inputs."""


class DataError(EvoEditError):
    """Malformed corpus data or schema violation."""


class ShapeError(EvoEditError):
    """Tensor shapes incompatible with the requested operation."""


class GradientError(EvoEditError):
    """Backward-pass contract violation (non-scalar loss, untracked loss)."""


class DivergenceError(EvoEditError):
    """Non-finite loss or gradient encountered during optimization."""


class EditStreamError(EvoEditError):
    """An edit in the stream failed; carries the offending step index."""

    def __init__(self, step_index: int, message: str):
        super().__init__(f"edit stream failed at step {step_index}: {message}")
        self.step_index = step_index
