"""SMNW weight file reading and writing.

Layout (little-endian):
    "SMNW", u32 version=1, u8 mode, u32 L, u32 W, u32 H (0 for LINE),
    u32 in_channels, u32 num_classes, u32 channels[L], u32 decoder_channels[L],
    f32 epsilon, then f32 arrays: encoder levels 1..L (kernel, bias, gamma, beta,
    mean, variance), decoder stages L..1 likewise, classifier kernel and bias.
"""

import struct
from typing import BinaryIO, Tuple

import numpy as np
from byoa.telemetry.log_manager.log_manager import LogManager

from shift_memory_segmentation.exceptions import (
    FormatError,
    ShapeMismatchError,
    SpecValidationError,
)
from shift_memory_segmentation.pyramid_model import (
    PyramidSpec,
    Weights,
    assemble_weights,
    stage_shapes,
    validate_spec,
)
from shift_memory_segmentation.pyramid_mode import PyramidMode
from shift_memory_segmentation.utils import read_exact

WEIGHTS_MAGIC = b"SMNW"
WEIGHTS_VERSION = 1
_HEAD = struct.Struct("<4sIBIIIII")
_F32 = np.dtype("<f4")

logger = LogManager.get_instance()


def weights_file_size(spec: PyramidSpec) -> int:
    """Exact byte size of a weight file for `spec`."""
    floats = 0
    for shape in stage_shapes(spec):
        floats += shape.kernel_size + shape.out_channels
        if shape.normalised:
            floats += 4 * shape.out_channels
    return _HEAD.size + 8 * spec.levels + 4 + 4 * floats


def save_weights(weights: Weights, spec: PyramidSpec, sink: BinaryIO):
    """
    Serialise `weights` for `spec` into a binary sink.

    Raises:
        ShapeMismatchError: the weights do not fit the pyramid.
    """
    weights.check(spec)
    sink.write(
        _HEAD.pack(
            WEIGHTS_MAGIC,
            WEIGHTS_VERSION,
            int(spec.mode),
            spec.levels,
            spec.width,
            spec.height,
            spec.in_channels,
            spec.num_classes,
        )
    )
    sink.write(struct.pack(f"<{spec.levels}I", *spec.channels))
    sink.write(struct.pack(f"<{spec.levels}I", *spec.decoder_channels))
    sink.write(struct.pack("<f", spec.epsilon))
    for array in weights.arrays():
        sink.write(np.ascontiguousarray(array, dtype=_F32).tobytes())


def _read(source: BinaryIO, size: int, what: str) -> bytes:
    data = read_exact(source, size)
    if len(data) != size:
        raise FormatError(f"Truncated weight file while reading {what}")
    return data


def _read_floats(source: BinaryIO, count: int, what: str) -> np.ndarray:
    array = np.frombuffer(_read(source, 4 * count, what), dtype=_F32).astype(np.float32)
    if not np.isfinite(array).all():
        raise FormatError(f"Non-finite value in {what}")
    return array


def load_weights(source: BinaryIO) -> Tuple[PyramidSpec, Weights]:
    """
    Read a weight file.

    Returns:
        (PyramidSpec, Weights): the validated architecture and its parameters.

    Raises:
        FormatError: bad magic or version, truncation, trailing bytes, or a spec
            invariant broken by the stored header.
    """
    magic, version, mode, levels, width, height, in_channels, num_classes = _HEAD.unpack(
        _read(source, _HEAD.size, "header")
    )
    if magic != WEIGHTS_MAGIC:
        raise FormatError(f"Bad weight file magic {magic!r}")
    if version != WEIGHTS_VERSION:
        raise FormatError(f"Unsupported weight file version {version}")
    channels = struct.unpack(f"<{levels}I", _read(source, 4 * levels, "channels"))
    decoder_channels = struct.unpack(f"<{levels}I", _read(source, 4 * levels, "decoder widths"))
    (epsilon,) = struct.unpack("<f", _read(source, 4, "epsilon"))
    try:
        spec = validate_spec(
            {
                "mode": PyramidMode(mode),
                "levels": levels,
                "width": width,
                "height": height,
                "in_channels": in_channels,
                "channels": list(channels),
                "decoder_channels": list(decoder_channels),
                "num_classes": num_classes,
                "epsilon": epsilon,
            }
        )
    except (SpecValidationError, ValueError) as exc:
        raise FormatError(f"Weight file header breaks the pyramid invariants: {exc}") from exc

    stages = []
    for index, shape in enumerate(stage_shapes(spec)):
        what = f"stage {index}"
        kernel = _read_floats(source, shape.kernel_size, f"{what} kernel")
        bias = _read_floats(source, shape.out_channels, f"{what} bias")
        if shape.normalised:
            norm = [
                _read_floats(source, shape.out_channels, f"{what} {name}")
                for name in ("gamma", "beta", "mean", "variance")
            ]
            if np.any(norm[3] < 0):
                raise FormatError(f"Negative variance in {what}")
            stages.append((kernel, bias, *norm))
        else:
            stages.append((kernel, bias))
    if source.read(1):
        raise FormatError("Trailing bytes after the classifier")
    try:
        weights = assemble_weights(spec, stages)
    except ShapeMismatchError as exc:
        raise FormatError(f"Weight arrays do not fit the header: {exc}") from exc
    return spec, weights


def save_weights_file(weights: Weights, spec: PyramidSpec, path: str):
    """Write a weight file to `path`."""
    with open(path, "wb") as file:
        save_weights(weights, spec, file)
    logger.info(f"Weights saved to {path} ({spec.describe()})")


def load_weights_file(path: str) -> Tuple[PyramidSpec, Weights]:
    """
    Read a weight file from `path`.

    Raises:
        FormatError: malformed file.
        OSError: the file cannot be opened.
    """
    try:
        with open(path, "rb") as file:
            spec, weights = load_weights(file)
    except FormatError as exc:
        logger.error(f"Error while loading weights from {path}: {exc}")
        raise
    logger.info(f"Weights loaded from {path} ({spec.describe()})")
    return spec, weights
