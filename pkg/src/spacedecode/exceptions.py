# coding: utf-8


class SpaceException(Exception):
    """
    Root exception for this package.
    """
    pass


class SpaceInvalidConfig(SpaceException):
    """
    Exception raised on an invalid model, decode, training or run configuration.
    """
    pass


class SpaceShapeError(SpaceException):
    """
    Exception raised when matrix dimensions do not line up.
    """
    pass


class SpaceNumericError(SpaceException):
    """
    Exception raised when a numeric operation produces NaN or Inf.
    """
    pass


class SpaceLayoutError(SpaceException):
    """
    Exception raised if a decode layout, attention mask or cache/output pairing is invalid.
    """
    pass


class SpaceIndexError(SpaceException):
    """
    Exception raised on an out-of-range KV cache slot.
    """
    pass


class SpaceDivergenceError(SpaceException):
    """
    Exception raised when the training loss stops being finite.
    """

    def __init__(self, message: str, step: int = -1, epoch: int = -1):
        super().__init__(message)
        self.step = step
        self.epoch = epoch


class SpaceGuardExceeded(SpaceException):
    """
    Exception raised when an exhaustive enumeration would be too large.
    """

    def __init__(self, message: str, estimate: int = 0):
        super().__init__(message)
        self.estimate = estimate


class SpaceCheckpointError(SpaceException):
    """
    Exception raised if a checkpoint file is unreadable or malformed.
    """
    pass


class SpaceInvalidCorpus(SpaceException):
    """
    Exception raised if a corpus file or training sample is invalid.
    """
    pass
