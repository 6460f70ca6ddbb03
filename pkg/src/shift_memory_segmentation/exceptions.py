"""Shift-memory segmentation exceptions"""

from typing import Optional


class SmnException(Exception):
    """Base error of the package"""


class ShapeMismatchError(SmnException, ValueError):
    """Raised when two maps or a map and a kernel do not line up"""


class NonFiniteValueError(SmnException, ValueError):
    """Raised when NaN or Inf reaches a kernel

    Args:
        what (str): Name of the offending operand
    """

    def __init__(self, what: str):
        super().__init__(f"Non-finite value in {what}")


class SpecValidationError(SmnException, ValueError):
    """Raised when a pyramid or scene configuration breaks an invariant"""


class InsufficientHistoryError(SmnException, ValueError):
    """Raised when a node is requested before enough frames exist

    Args:
        level (int): Pyramid level of the request
        time (int): Frame index of the request
        needed (int): Receptive field of that level
    """

    def __init__(self, level: int, time: int, needed: int):
        super().__init__(
            f"Level {level} node at frame {time} needs {needed} frames of history"
        )
        self.level = level
        self.time = time


class FormatError(SmnException, ValueError):
    """Raised when a weight, stream or label file is malformed

    Args:
        message (str): What is wrong
        frame_index (int, optional): Frame being decoded when the error happened
    """

    def __init__(self, message: str, frame_index: Optional[int] = None):
        if frame_index is not None:
            message = f"{message} (frame {frame_index})"
        super().__init__(message)
        self.frame_index = frame_index
