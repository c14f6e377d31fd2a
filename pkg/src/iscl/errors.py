"""Exception types shared across the package."""


class ISCLError(Exception):
    """Base class for all package errors."""


class ShapeError(ISCLError, ValueError):
    pass


class ImageFormatError(ISCLError, ValueError):
    """Raised for rasters that are not single-channel 8/16-bit."""


class DatasetError(ISCLError):
    pass


class DegenerateStatisticsError(ISCLError, ValueError):
    """Batch statistics requested from a batch that cannot provide them."""


class EvaluationUnavailable(ISCLError):
    """Validation references are missing, so metrics cannot be computed."""


class DivergenceError(ISCLError):
    """Training produced non-finite or runaway losses.

    ``breakdown`` holds the offending :class:`~iscl.losses.LossBreakdown`
    (or ``None``) and ``state`` the last good training state, if known.
    """

    def __init__(self, message, breakdown=None, state=None):
        super().__init__(message)
        self.breakdown = breakdown
        self.state = state
