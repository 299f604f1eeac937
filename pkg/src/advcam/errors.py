"""Exception hierarchy shared across the toolkit."""


class AdvCamError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(AdvCamError, ValueError):
    pass


class ValidationError(AdvCamError, ValueError):
    pass


class GraphStateError(AdvCamError, RuntimeError):
    pass


class TrainingError(AdvCamError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointFormatError(AdvCamError, ValueError):
    pass


class ClimbDivergenceError(AdvCamError, FloatingPointError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class DegenerateDirectionError(AdvCamError, ValueError):
    pass


class DatasetError(AdvCamError, IOError):
    pass
