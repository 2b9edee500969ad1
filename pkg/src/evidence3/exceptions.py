class Evidence3Error(Exception):
    """Base class for errors raised by this package."""


class CalibrationError(Evidence3Error, ValueError):
    """Not enough (or degenerate) clean data to calibrate the detector."""


class ImageSizeError(Evidence3Error, ValueError):
    """Image too small for the requested metric."""


class ScoringError(Evidence3Error, ValueError):
    pass


class TrainingError(Evidence3Error, RuntimeError):
    pass


class EvaluationError(Evidence3Error, ValueError):
    pass
