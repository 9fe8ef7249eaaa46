"""Exception hierarchy shared across the package."""


class CascadeflowError(Exception):
    """Base class for all package errors."""


class GridError(CascadeflowError):
    """Invalid field grid, resampling factors, or axis mismatch."""


class ScheduleError(CascadeflowError):
    """Invalid stage schedule or jump parameters."""


class PathError(CascadeflowError):
    """Invalid probability-path construction request."""


class TransitionError(CascadeflowError):
    """Invalid stage-transition (jump) request."""


class ModelError(CascadeflowError):
    """Velocity-model configuration or shape error."""


class TrainingError(CascadeflowError):
    """Training-loop failure."""


class TrainingDiverged(TrainingError):
    """Loss or parameters became non-finite during training."""

    def __init__(self, message, step=None, stage=None, t=None):
        super().__init__(message)
        self.step = step
        self.stage = stage
        self.t = t


class SamplingError(CascadeflowError):
    """Invalid sampling request or non-finite ODE state."""


class ContainerError(CascadeflowError):
    """Malformed on-disk dataset/sample container."""


class ConfigError(CascadeflowError):
    """Invalid run configuration."""
