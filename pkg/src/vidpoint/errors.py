"""Exception hierarchy shared by every vidpoint module."""


class VidpointError(Exception):
    """Base class for all structured errors raised by the toolkit."""


class ShapeError(VidpointError, ValueError):
    """Array or point-count mismatch."""


class GeometryError(VidpointError, ValueError):
    """Degenerate geometric input (empty set, collinear sample, zero vector)."""


class PipelineError(VidpointError):
    """A preprocessing stage produced an unusable cloud."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class ConfigError(VidpointError, ValueError):
    """Invalid or unknown configuration key/value."""


class DataError(VidpointError):
    """Dataset too small or inconsistent for the requested operation."""


class MissingArtifactError(VidpointError):
    """A dataset, manifest or checkpoint a command depends on is absent."""


class NumericalError(VidpointError):
    """A loss became non-finite during training."""

    def __init__(self, step, unit="step"):
        super().__init__(f"non-finite loss at {unit} {step}")
        self.step = step
