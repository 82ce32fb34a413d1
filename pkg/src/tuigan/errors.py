class TuiGANError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TuiGANError, ValueError):
    """Invalid configuration, e.g. a pyramid whose coarsest level is too small."""


class ShapeError(TuiGANError, ValueError):
    pass


class ContractError(TuiGANError, RuntimeError):
    """A caller violated a precondition (missing chain entry, uninitialized scale)."""


class ImageFormatError(TuiGANError, ValueError):
    pass


class TrainingDivergence(TuiGANError, FloatingPointError):
    """A loss became NaN/inf during training."""

    def __init__(self, message: str, scale: int | None = None, iteration: int | None = None):
        super().__init__(message)
        self.scale = scale
        self.iteration = iteration


class ManifestError(TuiGANError, ValueError):
    def __init__(self, message: str, offenders: list | None = None):
        super().__init__(message)
        self.offenders = list(offenders or [])


class DegenerateStatisticsError(TuiGANError, ValueError):
    pass


class CheckpointError(TuiGANError, RuntimeError):
    def __init__(self, message: str, missing_scales: list[int] | None = None):
        super().__init__(message)
        self.missing_scales = list(missing_scales or [])
