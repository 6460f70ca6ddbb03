"""SMNS frame streams, SMNL label files and synthetic scene generation.

SMNS (little-endian): "SMNS", u32 version=1, u8 mode, u8 dtype (1=u8, 2=f32),
u32 W, u32 H (0 for LINE), u32 channels, u64 frame_count (0 = read to EOF),
then channel-major row-major frames.

SMNL: "SMNL", u32 version=1, u8 mode, u32 W, u32 H, then per labelled frame a
u64 frame index followed by the row-major u8 labels.
"""

import math
import struct
from dataclasses import dataclass
from math import prod
from typing import BinaryIO, Iterable, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np
from byoa.telemetry.log_manager.log_manager import LogManager
from pydantic import ValidationError

from schemas.input_schema import SceneConfig, SceneObject
from shift_memory_segmentation.exceptions import FormatError, SpecValidationError
from shift_memory_segmentation.pyramid_mode import PyramidMode, SampleType
from shift_memory_segmentation.tensor_core import FeatureMap, LabelMap
from shift_memory_segmentation.utils import SplitMix64, read_exact

STREAM_MAGIC = b"SMNS"
LABELS_MAGIC = b"SMNL"
FORMAT_VERSION = 1
_STREAM_HEAD = struct.Struct("<4sIBBIIIQ")
_LABELS_HEAD = struct.Struct("<4sIBII")
_INDEX = struct.Struct("<Q")
_F32 = np.dtype("<f4")

logger = LogManager.get_instance()


def _frame_dims(mode: PyramidMode, width: int, height: int) -> Tuple[int, ...]:
    return (width,) if mode is PyramidMode.LINE else (height, width)


def _check_dims(mode: PyramidMode, width: int, height: int, what: str):
    if width <= 0:
        raise FormatError(f"{what}: width must be positive, got {width}")
    if mode is PyramidMode.LINE and height != 0:
        raise FormatError(f"{what}: line streams must have height 0, got {height}")
    if mode is PyramidMode.VIDEO and height <= 0:
        raise FormatError(f"{what}: video streams need a positive height")


@dataclass(frozen=True)
class StreamHeader:
    """
    Header of an SMNS stream.

    Attributes:
        mode (PyramidMode): LINE or VIDEO.
        dtype (SampleType): U8 (value / 255 on read) or F32.
        width (int): frame width.
        height (int): frame height, 0 for LINE.
        channels (int): channels per frame.
        frame_count (int): frames in the stream, 0 when unknown.
    """

    mode: PyramidMode
    dtype: SampleType
    width: int
    height: int
    channels: int
    frame_count: int = 0

    @property
    def frame_dims(self) -> Tuple[int, ...]:
        return _frame_dims(self.mode, self.width, self.height)

    @property
    def frame_shape(self) -> Tuple[int, ...]:
        return (self.channels,) + self.frame_dims

    @property
    def frame_bytes(self) -> int:
        size = 1 if self.dtype is SampleType.U8 else 4
        return prod(self.frame_shape) * size

    def pack(self) -> bytes:
        return _STREAM_HEAD.pack(
            STREAM_MAGIC,
            FORMAT_VERSION,
            int(self.mode),
            int(self.dtype),
            self.width,
            self.height,
            self.channels,
            self.frame_count,
        )


def _encode_frame(header: StreamHeader, frame: FeatureMap) -> bytes:
    if frame.data.shape != header.frame_shape:
        raise FormatError(
            f"Frame of shape {frame.data.shape} does not match the stream shape "
            f"{header.frame_shape}"
        )
    if header.dtype is SampleType.U8:
        return np.rint(np.clip(frame.data, 0.0, 1.0) * 255.0).astype(np.uint8).tobytes()
    return frame.data.astype(_F32).tobytes()


def _decode_frame(header: StreamHeader, payload: bytes) -> FeatureMap:
    if header.dtype is SampleType.U8:
        values = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / np.float32(255.0)
    else:
        values = np.frombuffer(payload, dtype=_F32).astype(np.float32)
    return FeatureMap(values.reshape(header.frame_shape))


def write_stream(header: StreamHeader, frames: Iterable[FeatureMap], sink: BinaryIO) -> int:
    """
    Write an SMNS stream.

    Returns:
        int: frames written.

    Raises:
        FormatError: a frame does not match the header.
    """
    _check_dims(header.mode, header.width, header.height, "Stream header")
    sink.write(header.pack())
    count = 0
    for frame in frames:
        sink.write(_encode_frame(header, frame))
        count += 1
    if header.frame_count and count != header.frame_count:
        raise FormatError(f"Header announces {header.frame_count} frames, wrote {count}")
    return count


def read_stream_header(source: BinaryIO) -> StreamHeader:
    """
    Raises:
        FormatError: bad magic, version, mode, dtype or dims.
    """
    data = read_exact(source, _STREAM_HEAD.size)
    if len(data) != _STREAM_HEAD.size:
        raise FormatError("Truncated stream header")
    magic, version, mode, dtype, width, height, channels, frame_count = _STREAM_HEAD.unpack(data)
    if magic != STREAM_MAGIC:
        raise FormatError(f"Bad stream magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported stream version {version}")
    try:
        mode, dtype = PyramidMode(mode), SampleType(dtype)
    except ValueError as exc:
        raise FormatError(f"Bad stream mode or dtype: {exc}") from exc
    _check_dims(mode, width, height, "Stream header")
    if channels <= 0:
        raise FormatError("Stream header: channels must be positive")
    return StreamHeader(mode, dtype, width, height, channels, frame_count)


def iter_frames(header: StreamHeader, source: BinaryIO) -> Iterator[FeatureMap]:
    """
    Frames after the header, in order.

    Raises:
        FormatError: a frame is cut short, or fewer frames than announced.
    """
    index = 0
    while not header.frame_count or index < header.frame_count:
        payload = read_exact(source, header.frame_bytes)
        if not payload and not header.frame_count:
            return
        if len(payload) != header.frame_bytes:
            raise FormatError("Truncated stream", frame_index=index)
        yield _decode_frame(header, payload)
        index += 1


def read_stream(source: BinaryIO) -> Tuple[StreamHeader, Iterator[FeatureMap]]:
    """
    Open an SMNS stream.

    Returns:
        (StreamHeader, Iterator[FeatureMap]): the header and a lazy frame iterator.
    """
    header = read_stream_header(source)
    return header, iter_frames(header, source)


@dataclass(frozen=True)
class LabelHeader:
    """Header of an SMNL label file."""

    mode: PyramidMode
    width: int
    height: int

    @property
    def frame_dims(self) -> Tuple[int, ...]:
        return _frame_dims(self.mode, self.width, self.height)


def write_labels(
    header: LabelHeader, labelled: Iterable[Tuple[int, LabelMap]], sink: BinaryIO
) -> int:
    """
    Write an SMNL file from (frame index, labels) pairs.

    Returns:
        int: labelled frames written.
    """
    sink.write(
        _LABELS_HEAD.pack(
            LABELS_MAGIC, FORMAT_VERSION, int(header.mode), header.width, header.height
        )
    )
    count = 0
    for index, labels in labelled:
        if labels.spatial_dims != header.frame_dims:
            raise FormatError(
                f"Labels of shape {labels.spatial_dims} do not match {header.frame_dims}",
                frame_index=index,
            )
        sink.write(_INDEX.pack(index))
        sink.write(labels.tobytes())
        count += 1
    return count


def read_labels(source: BinaryIO) -> Tuple[LabelHeader, Iterator[Tuple[int, np.ndarray]]]:
    """
    Open an SMNL file.

    Returns:
        (LabelHeader, Iterator): header and lazy (frame index, uint8 labels) pairs.

    Raises:
        FormatError: bad magic or version, or a truncated record.
    """
    data = read_exact(source, _LABELS_HEAD.size)
    if len(data) != _LABELS_HEAD.size:
        raise FormatError("Truncated label header")
    magic, version, mode, width, height = _LABELS_HEAD.unpack(data)
    if magic != LABELS_MAGIC:
        raise FormatError(f"Bad label magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported label version {version}")
    try:
        header = LabelHeader(PyramidMode(mode), width, height)
    except ValueError as exc:
        raise FormatError(f"Bad label mode: {exc}") from exc
    _check_dims(header.mode, width, height, "Label header")

    def records() -> Iterator[Tuple[int, np.ndarray]]:
        size = prod(header.frame_dims)
        while True:
            head = read_exact(source, _INDEX.size)
            if not head:
                return
            if len(head) != _INDEX.size:
                raise FormatError("Truncated label record")
            (index,) = _INDEX.unpack(head)
            payload = read_exact(source, size)
            if len(payload) != size:
                raise FormatError("Truncated label record", frame_index=index)
            yield index, np.frombuffer(payload, dtype=np.uint8).reshape(header.frame_dims)

    return header, records()


def parse_objects(text: str) -> List[SceneObject]:
    """
    Parse `width:velocity:intensity:class` items separated by `;`.

    Raises:
        SpecValidationError: malformed item or out-of-range field.
    """
    objects = []
    for item in filter(None, (part.strip() for part in (text or "").split(";"))):
        fields = item.split(":")
        if len(fields) != 4:
            raise SpecValidationError(
                f"Object '{item}' must be width:velocity:intensity:class"
            )
        try:
            objects.append(
                SceneObject(
                    width=int(fields[0]),
                    velocity=float(fields[1]),
                    intensity=float(fields[2]),
                    class_id=int(fields[3]),
                )
            )
        except (ValueError, ValidationError) as exc:
            raise SpecValidationError(f"Invalid object '{item}': {exc}") from exc
    return objects


def validate_scene(config: Union[SceneConfig, Mapping]) -> SceneConfig:
    """
    Check a scene description.

    Raises:
        SpecValidationError: pydantic validation failure, a class id out of
            range, an object larger than the frame or inconsistent dims.
    """
    try:
        scene = config if isinstance(config, SceneConfig) else SceneConfig(**config)
    except ValidationError as exc:
        raise SpecValidationError(f"Invalid scene: {exc}") from exc
    if scene.mode is PyramidMode.LINE and scene.height:
        raise SpecValidationError("Line scenes have no height")
    if scene.mode is PyramidMode.VIDEO and not scene.height:
        raise SpecValidationError("Video scenes need a height")
    for index, item in enumerate(scene.objects):
        if item.class_id >= scene.num_classes:
            raise SpecValidationError(
                f"Object {index} class {item.class_id} not below {scene.num_classes}"
            )
        if item.width > min(_frame_dims(scene.mode, scene.width, scene.height)):
            raise SpecValidationError(f"Object {index} is wider than the frame")
    return scene


class SceneRenderer:
    """
    Deterministic moving-object scene.

    Each object draws its start column (and row for video) from splitmix64 in
    list order. At frame t it covers `width` cells from
    floor(x0 + v * t + 0.5) mod W, wrapping; later objects overwrite earlier ones.

    Args:
        scene (SceneConfig): validated scene.
    """

    def __init__(self, scene: SceneConfig):
        self.scene = scene
        generator = SplitMix64(scene.seed)
        self.starts = []
        for _ in scene.objects:
            x0 = generator.next_u64() % scene.width
            y0 = generator.next_u64() % scene.height if scene.mode is PyramidMode.VIDEO else 0
            self.starts.append((x0, y0))

    def _cover(self, t: int) -> Iterator[Tuple[SceneObject, Tuple]]:
        scene = self.scene
        for item, (x0, y0) in zip(scene.objects, self.starts):
            x = math.floor(x0 + item.velocity * t + 0.5) % scene.width
            cols = (x + np.arange(item.width)) % scene.width
            if scene.mode is PyramidMode.LINE:
                yield item, (cols,)
            else:
                rows = (y0 + np.arange(item.width)) % scene.height
                yield item, np.ix_(rows, cols)

    def frame(self, t: int) -> FeatureMap:
        """Intensities of frame t, replicated over the scene channels."""
        scene = self.scene
        canvas = np.full(_frame_dims(scene.mode, scene.width, scene.height), scene.background)
        for item, where in self._cover(t):
            canvas[where] = item.intensity
        return FeatureMap(np.broadcast_to(canvas, (scene.channels,) + canvas.shape))

    def truth(self, t: int) -> LabelMap:
        """Class of every cell of frame t, background 0."""
        scene = self.scene
        labels = np.zeros(_frame_dims(scene.mode, scene.width, scene.height), dtype=np.uint8)
        for item, where in self._cover(t):
            labels[where] = item.class_id
        return LabelMap(labels, scene.num_classes)

    def header(self) -> StreamHeader:
        scene = self.scene
        return StreamHeader(
            mode=scene.mode,
            dtype=SampleType.U8 if scene.dtype == "u8" else SampleType.F32,
            width=scene.width,
            height=scene.height,
            channels=scene.channels,
            frame_count=scene.frames,
        )

    def frames(self) -> Iterator[FeatureMap]:
        return (self.frame(t) for t in range(self.scene.frames))


def gen_synthetic(
    config: Union[SceneConfig, Mapping],
    sink: BinaryIO,
    truth_sink: Optional[BinaryIO] = None,
) -> StreamHeader:
    """
    Render a scene into an SMNS stream, and optionally its ground truth as SMNL.

    Returns:
        StreamHeader: header written.

    Raises:
        SpecValidationError: invalid scene.
    """
    renderer = SceneRenderer(validate_scene(config))
    header = renderer.header()
    write_stream(header, renderer.frames(), sink)
    if truth_sink is not None:
        write_labels(
            LabelHeader(header.mode, header.width, header.height),
            ((t, renderer.truth(t)) for t in range(header.frame_count)),
            truth_sink,
        )
    logger.info(
        f"Generated {header.frame_count} {header.mode.name.lower()} frames "
        f"with {len(renderer.scene.objects)} objects"
    )
    return header
