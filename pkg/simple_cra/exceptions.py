class CRAError(Exception):
    """Base class for exceptions in this module."""

    pass


class SizeMismatchError(CRAError):
    pass


class InvalidShapeError(CRAError):
    pass


class DetachedTensorError(CRAError):
    pass


class NonScalarLossError(CRAError):
    pass


class NumericOverflowError(CRAError):
    pass


class InvalidConfigError(CRAError):
    pass


class InvalidTargetError(CRAError):
    pass


class EmptyTraceError(CRAError):
    pass


class UnsupportedArchitectureError(CRAError):
    pass


class MissingConfigError(CRAError):
    pass


class InvalidConventionError(CRAError):
    pass


class CorruptDatasetError(CRAError):
    """Raised when a dataset file is missing, truncated or holds invalid records.

    Args:
        path (str): file that failed to parse
        offset (int): byte offset of the first bad record
        reason (str): short description
    """

    def __init__(self, path, offset: int, reason: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{reason} ({self.path} at byte offset {offset})")


class DivergedTrainingError(CRAError):
    """Raised when a loss or gradient stops being finite.

    Args:
        message (str): description
        epoch (int, optional): epoch index where the divergence was seen
        parameter (str, optional): name of the parameter with a non-finite gradient
    """

    def __init__(self, message: str, epoch: int = None, parameter: str = None):
        self.epoch = epoch
        self.parameter = parameter
        super().__init__(message)
