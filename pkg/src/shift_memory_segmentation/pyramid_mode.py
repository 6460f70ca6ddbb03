"""Enumerations shared by the pyramid, the engines and the file formats"""

from enum import Enum, IntEnum


class PyramidMode(IntEnum):
    """
    Spatial layout of a stream. The integer value is the on-disk mode byte.
    """

    LINE = 1
    VIDEO = 2

    @classmethod
    def from_name(cls, name: str) -> "PyramidMode":
        """Parse 'line' / 'video' (any case)."""
        try:
            return cls[name.upper()]
        except KeyError as exc:
            raise ValueError(f"Unknown pyramid mode '{name}', expected line or video") from exc


class SampleType(IntEnum):
    """
    Payload encoding of stream frames
    """

    U8 = 1
    F32 = 2


class EngineKind(Enum):
    """
    Available evaluation engines
    """

    PATCH = "patch"
    SHIFT = "shift"
    SMN = "smn"


class FrameStatus(Enum):
    """
    Status of one engine step.

    WARMING: receptive field not yet filled, no output.
    READY: labels and front column emitted.
    IDLE: patch driver only, warm-up done but not a window-end frame.
    """

    WARMING = "WARMING"
    READY = "READY"
    IDLE = "IDLE"
