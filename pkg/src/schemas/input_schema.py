"""Input schema classes"""

from typing import List, Literal, Optional, Union

from pydantic import BaseModel, Field, field_validator

from shift_memory_segmentation.pyramid_mode import PyramidMode


def _parse_mode(value: Union[str, int, PyramidMode]) -> PyramidMode:
    if isinstance(value, str):
        return PyramidMode.from_name(value)
    return PyramidMode(value)


class PyramidConfig(BaseModel):
    """
    Raw pyramid configuration, before the invariants are checked

    Attributes:
        mode (PyramidMode): line (1D x t) or video (2D x t); accepts "line" / "video".
        levels (int): number of encoder levels L.
        width (int): frame width in pixels.
        height (int): frame height in pixels, 0 for line streams.
        in_channels (int): channels of the raw frames.
        channels (List[int], optional): encoder widths per level, defaults derived from L.
        decoder_channels (List[int], optional): decoder widths per level, defaults to `channels`.
        num_classes (int): number of segmentation classes.
        epsilon (float): normalisation epsilon shared by every level.
        frames (int, optional): temporal span T; when given it must equal 2**levels.
    """

    mode: PyramidMode
    levels: int = Field(ge=0)
    width: int = Field(gt=0)
    height: int = Field(default=0, ge=0)
    in_channels: int = Field(default=1, gt=0)
    channels: Optional[List[int]] = None
    decoder_channels: Optional[List[int]] = None
    num_classes: int = Field(default=2, gt=0)
    epsilon: float = Field(default=1e-5, gt=0)
    frames: Optional[int] = None

    @field_validator("mode", mode="before")
    @classmethod
    def parse_mode(cls, value):
        """Accept mode names as well as mode numbers."""
        return _parse_mode(value)


class SceneObject(BaseModel):
    """
    One moving bar (line streams) or block (video streams)

    Attributes:
        width (int): extent in pixels along every spatial dim.
        velocity (float): horizontal displacement in pixels per frame, signed.
        intensity (float): value painted into the object cells, in [0, 1].
        class_id (int): ground-truth class of the object cells.
    """

    width: int = Field(gt=0)
    velocity: float
    intensity: float = Field(ge=0.0, le=1.0)
    class_id: int = Field(ge=0)


class SceneConfig(BaseModel):
    """
    Synthetic scene description

    Attributes:
        mode (PyramidMode): line or video.
        width (int): frame width.
        height (int): frame height, 0 for line streams.
        channels (int): channels written per frame (the intensity is replicated).
        frames (int): number of frames to generate.
        background (float): background intensity in [0, 1].
        objects (List[SceneObject]): objects, later entries drawn over earlier ones.
        seed (int): splitmix64 seed for the initial object positions.
        num_classes (int): class count the object class ids must respect.
        dtype (str): payload encoding, "u8" or "f32".
    """

    mode: PyramidMode
    width: int = Field(gt=0)
    height: int = Field(default=0, ge=0)
    channels: int = Field(default=1, gt=0)
    frames: int = Field(gt=0)
    background: float = Field(default=0.0, ge=0.0, le=1.0)
    objects: List[SceneObject] = Field(default_factory=list)
    seed: int = 0
    num_classes: int = Field(default=2, gt=0)
    dtype: Literal["u8", "f32"] = "f32"

    @field_validator("mode", mode="before")
    @classmethod
    def parse_mode(cls, value):
        """Accept mode names as well as mode numbers."""
        return _parse_mode(value)
