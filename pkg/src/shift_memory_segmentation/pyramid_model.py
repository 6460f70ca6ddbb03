"""Pyramid architecture, the shared front-node recurrence, the decoder and weight init.

Level 0 is the raw frame. Level l >= 1 keeps two node kinds per time tau:

    c_l(tau) = norm_act(conv_pair(f_{l-1}(tau - s_l), f_{l-1}(tau)))
    f_l(tau) = spatial_pool(temporal_max(c_l(tau - s_l), c_l(tau)))

with lag s_l = 2**(l-1). Every engine evaluates exactly these two functions, so
they can only differ in which earlier values they reuse.
"""

from dataclasses import dataclass
from math import prod
from typing import Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from schemas.input_schema import PyramidConfig
from shift_memory_segmentation.exceptions import ShapeMismatchError, SpecValidationError
from shift_memory_segmentation.pyramid_mode import PyramidMode
from shift_memory_segmentation.tensor_core import (
    ConvKernel,
    FeatureMap,
    LabelMap,
    NormParams,
    argmax_channels,
    concat_channels,
    conv_pair,
    conv_spatial,
    norm_act,
    spatial_pool,
    temporal_max,
    upsample_nearest,
)
from shift_memory_segmentation.utils import SplitMix64, symmetric_uniform

DEFAULT_CHANNELS = (16, 32, 32, 64, 64)
DEFAULT_EPSILON = 1e-5


def receptive_field(level: int) -> int:
    """Raw frames a level-`level` front node depends on: R_0 = 1, R_l = R_{l-1} + 2**l."""
    return 2 ** (level + 1) - 1


def lag(level: int) -> int:
    """Temporal distance s_l = 2**(l-1) between the two inputs of a level-l conv."""
    return 2 ** (level - 1)


def default_channels(levels: int) -> Tuple[int, ...]:
    """Encoder widths for `levels` levels; the last default width repeats past level 5."""
    widths = DEFAULT_CHANNELS[:levels]
    return widths + (DEFAULT_CHANNELS[-1],) * (levels - len(widths))


@dataclass(frozen=True)
class PyramidSpec:
    """
    Validated pyramid architecture. Build it through `validate_spec`.

    Attributes:
        mode (PyramidMode): LINE (1D x t) or VIDEO (2D x t).
        levels (int): number of encoder levels L.
        width (int): frame width, divisible by 2**L.
        height (int): frame height (0 for LINE), divisible by 2**L.
        in_channels (int): channels of f_0.
        channels (Tuple[int, ...]): encoder width of f_1 .. f_L.
        decoder_channels (Tuple[int, ...]): output width of decoder stages 1 .. L.
        num_classes (int): classifier outputs.
        epsilon (float): normalisation epsilon.
    """

    mode: PyramidMode
    levels: int
    width: int
    height: int
    in_channels: int
    channels: Tuple[int, ...]
    decoder_channels: Tuple[int, ...]
    num_classes: int
    epsilon: float = DEFAULT_EPSILON

    @classmethod
    def geometry(
        cls, mode: PyramidMode, levels: int, width: int, height: int = 0
    ) -> "PyramidSpec":
        """
        Spec with default widths, for cell and memory accounting only.

        Unlike `validate_spec` this accepts L = 0 (a bare frame, no pyramid).

        Raises:
            SpecValidationError: the dims are not divisible by 2**L.
        """
        _check_dims(mode, levels, width, height)
        widths = default_channels(levels)
        return cls(
            mode=mode,
            levels=levels,
            width=width,
            height=height if mode is PyramidMode.VIDEO else 0,
            in_channels=1,
            channels=widths,
            decoder_channels=widths,
            num_classes=2,
        )

    @property
    def frames(self) -> int:
        """T = 2**L."""
        return 2**self.levels

    @property
    def rank(self) -> int:
        return 1 if self.mode is PyramidMode.LINE else 2

    @property
    def frame_dims(self) -> Tuple[int, ...]:
        return self.level_dims(0)

    def level_dims(self, level: int) -> Tuple[int, ...]:
        """Spatial dims of f_level."""
        scale = 2**level
        if self.mode is PyramidMode.LINE:
            return (self.width // scale,)
        return (self.height // scale, self.width // scale)

    def level_cells(self, level: int) -> int:
        """Channel-free cell count of f_level."""
        return prod(self.level_dims(level))

    def level_channels(self, level: int) -> int:
        """Channels of f_level, level 0 being the raw frame."""
        return self.in_channels if level == 0 else self.channels[level - 1]

    def decoder_out_channels(self, level: int) -> int:
        """Channels produced by decoder stage `level` (at level-1 resolution)."""
        return self.decoder_channels[level - 1]

    def decoder_in_channels(self, level: int) -> int:
        """Upsampled decoder input plus the f_{level-1} skip."""
        upper = (
            self.level_channels(self.levels)
            if level == self.levels
            else self.decoder_out_channels(level + 1)
        )
        return upper + self.level_channels(level - 1)

    def classifier_in_channels(self) -> int:
        return self.decoder_out_channels(1) if self.levels else self.in_channels

    def describe(self) -> str:
        """One-line summary for logs."""
        dims = "x".join(str(d) for d in self.frame_dims)
        return (
            f"{self.mode.name} L={self.levels} T={self.frames} dims={dims} "
            f"in={self.in_channels} enc={list(self.channels)} "
            f"dec={list(self.decoder_channels)} classes={self.num_classes}"
        )


def _check_dims(mode: PyramidMode, levels: int, width: int, height: int):
    if levels < 0:
        raise SpecValidationError(f"Level count must be non-negative, got {levels}")
    scale = 2**levels
    if width <= 0 or width % scale:
        raise SpecValidationError(f"Width {width} is not a positive multiple of 2^{levels}")
    if mode is PyramidMode.VIDEO and (height <= 0 or height % scale):
        raise SpecValidationError(f"Height {height} is not a positive multiple of 2^{levels}")


def _widths(name: str, widths: Optional[Sequence[int]], levels: int) -> Tuple[int, ...]:
    if widths is None:
        return default_channels(levels)
    if len(widths) == 0:
        raise SpecValidationError(f"Empty {name} list")
    if len(widths) != levels:
        raise SpecValidationError(f"{name} lists {len(widths)} widths for {levels} levels")
    if any(width <= 0 for width in widths):
        raise SpecValidationError(f"{name} widths must be positive, got {list(widths)}")
    return tuple(int(width) for width in widths)


def validate_spec(config: Union[PyramidConfig, Mapping]) -> PyramidSpec:
    """
    Check a raw configuration and build the pyramid spec.

    Args:
        config (PyramidConfig or dict): raw fields.

    Returns:
        PyramidSpec: the validated spec.

    Raises:
        SpecValidationError: T is not a power of two, W/H not divisible by 2**L,
            empty channel lists or any other broken invariant.
    """
    if not isinstance(config, PyramidConfig):
        try:
            config = PyramidConfig(**config)
        except ValidationError as exc:
            raise SpecValidationError(f"Invalid pyramid configuration: {exc}") from exc
    if config.levels < 1:
        raise SpecValidationError(f"A pyramid needs at least one level, got {config.levels}")
    if config.frames is not None:
        if config.frames <= 0 or config.frames & (config.frames - 1):
            raise SpecValidationError(f"T={config.frames} is not a power of two")
        if config.frames != 2**config.levels:
            raise SpecValidationError(
                f"T={config.frames} does not match 2^{config.levels} for {config.levels} levels"
            )
    height = config.height if config.mode is PyramidMode.VIDEO else 0
    if config.mode is PyramidMode.LINE and config.height:
        raise SpecValidationError("Line streams take no height")
    _check_dims(config.mode, config.levels, config.width, height)
    if config.num_classes > 256:
        raise SpecValidationError(f"At most 256 classes fit u8 labels, got {config.num_classes}")
    channels = _widths("channels", config.channels, config.levels)
    decoder_channels = _widths(
        "decoder_channels",
        channels if config.decoder_channels is None else config.decoder_channels,
        config.levels,
    )
    return PyramidSpec(
        mode=config.mode,
        levels=config.levels,
        width=config.width,
        height=height,
        in_channels=config.in_channels,
        channels=channels,
        decoder_channels=decoder_channels,
        num_classes=config.num_classes,
        # stored as f32 in the weight file
        epsilon=float(np.float32(config.epsilon)),
    )


@dataclass(frozen=True, eq=False)
class LevelWeights:
    """Kernel and normalisation of one encoder or decoder stage."""

    kernel: ConvKernel
    norm: NormParams


@dataclass(frozen=True, eq=False)
class Weights:
    """
    Every parameter of the pyramid.

    Attributes:
        encoder (Tuple[LevelWeights, ...]): levels 1 .. L, index l-1.
        decoder (Tuple[LevelWeights, ...]): stages 1 .. L, index l-1.
        classifier (ConvKernel): 1x1 kernel to num_classes, no normalisation.
    """

    encoder: Tuple[LevelWeights, ...]
    decoder: Tuple[LevelWeights, ...]
    classifier: ConvKernel

    def encoder_level(self, level: int) -> LevelWeights:
        return self.encoder[level - 1]

    def decoder_level(self, level: int) -> LevelWeights:
        return self.decoder[level - 1]

    def check(self, spec: PyramidSpec):
        """
        Validate every shape against `spec`.

        Raises:
            ShapeMismatchError: a kernel or norm does not fit the pyramid.
        """
        if len(self.encoder) != spec.levels or len(self.decoder) != spec.levels:
            raise ShapeMismatchError(
                f"Weights hold {len(self.encoder)}/{len(self.decoder)} stages "
                f"for {spec.levels} levels"
            )
        for level in range(1, spec.levels + 1):
            _expect(
                self.encoder_level(level),
                f"encoder level {level}",
                spec.level_channels(level),
                spec.level_channels(level - 1),
                2,
                spec.rank,
            )
            _expect(
                self.decoder_level(level),
                f"decoder level {level}",
                spec.decoder_out_channels(level),
                spec.decoder_in_channels(level),
                1,
                spec.rank,
            )
        classifier = self.classifier
        if (
            classifier.out_channels != spec.num_classes
            or classifier.in_channels != spec.classifier_in_channels()
            or classifier.temporal_taps != 1
            or classifier.spatial_taps != 1
        ):
            raise ShapeMismatchError("Classifier shape does not match the pyramid")

    def arrays(self) -> Iterator:
        """All float32 arrays in serialisation order."""
        for stage in self.encoder + tuple(reversed(self.decoder)):
            yield stage.kernel.weights
            yield stage.kernel.bias
            yield stage.norm.gamma
            yield stage.norm.beta
            yield stage.norm.mean
            yield stage.norm.variance
        yield self.classifier.weights
        yield self.classifier.bias


def _expect(stage: LevelWeights, what: str, out_ch: int, in_ch: int, taps: int, rank: int):
    kernel = stage.kernel
    if (
        kernel.out_channels != out_ch
        or kernel.in_channels != in_ch
        or kernel.temporal_taps != taps
        or kernel.spatial_taps != 2
        or kernel.rank != rank
    ):
        raise ShapeMismatchError(
            f"{what}: kernel {kernel.weights.shape} does not match out={out_ch} in={in_ch} "
            f"temporal taps={taps} rank={rank}"
        )
    if stage.norm.channels != out_ch:
        raise ShapeMismatchError(f"{what}: {stage.norm.channels} norm channels, expected {out_ch}")


@dataclass(frozen=True)
class StageShape:
    """Kernel geometry of one stage, in serialisation order."""

    out_channels: int
    in_channels: int
    temporal_taps: int
    spatial_taps: int
    normalised: bool

    @property
    def kernel_size(self) -> int:
        return self.out_channels * self.in_channels * self.temporal_taps * self.spatial_taps

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.temporal_taps * self.spatial_taps


def stage_shapes(spec: PyramidSpec) -> List[StageShape]:
    """Encoder 1..L, decoder L..1, classifier: the weight-file and draw order."""
    taps = 2**spec.rank
    shapes = [
        StageShape(spec.level_channels(level), spec.level_channels(level - 1), 2, taps, True)
        for level in range(1, spec.levels + 1)
    ]
    shapes += [
        StageShape(
            spec.decoder_out_channels(level), spec.decoder_in_channels(level), 1, taps, True
        )
        for level in range(spec.levels, 0, -1)
    ]
    shapes.append(StageShape(spec.num_classes, spec.classifier_in_channels(), 1, 1, False))
    return shapes


def assemble_weights(spec: PyramidSpec, stages: Sequence[Tuple]) -> Weights:
    """
    Build Weights from per-stage arrays in serialisation order.

    Args:
        spec (PyramidSpec): the architecture.
        stages: (kernel, bias, gamma, beta, mean, variance) per normalised stage, then
            (kernel, bias) for the classifier.
    """
    shapes = stage_shapes(spec)
    built = []
    for shape, arrays in zip(shapes[:-1], stages[:-1]):
        kernel = ConvKernel.from_flat(
            shape.out_channels,
            shape.in_channels,
            shape.temporal_taps,
            2,
            spec.rank,
            arrays[0],
            arrays[1],
        )
        built.append(LevelWeights(kernel, NormParams(*arrays[2:6], epsilon=spec.epsilon)))
    classifier_shape = shapes[-1]
    classifier = ConvKernel.from_flat(
        classifier_shape.out_channels,
        classifier_shape.in_channels,
        1,
        1,
        spec.rank,
        stages[-1][0],
        stages[-1][1],
    )
    encoder = tuple(built[: spec.levels])
    decoder = tuple(reversed(built[spec.levels :]))
    weights = Weights(encoder, decoder, classifier)
    weights.check(spec)
    return weights


def init_weights(spec: PyramidSpec, seed: int) -> Weights:
    """
    Deterministic pseudo-random weights.

    Kernels and biases are drawn from splitmix64(seed) in weight-file order and
    mapped to [-0.5/fan_in, +0.5/fan_in), fan_in = in_channels * temporal taps *
    spatial taps of the stage. Normalisation starts at gamma=1, beta=0, mean=0,
    variance=1 and consumes no draws.
    """
    generator = SplitMix64(seed)
    stages = []
    for shape in stage_shapes(spec):
        half_width = 0.5 / shape.fan_in
        kernel = symmetric_uniform(generator, shape.kernel_size, half_width)
        bias = symmetric_uniform(generator, shape.out_channels, half_width)
        if shape.normalised:
            norm = NormParams.identity(shape.out_channels, spec.epsilon)
            stages.append((kernel, bias, norm.gamma, norm.beta, norm.mean, norm.variance))
        else:
            stages.append((kernel, bias))
    return assemble_weights(spec, stages)


class FrontColumn:
    """
    The newest node of every level at one time, f_0(t) .. f_L(t).

    Args:
        maps (Sequence[FeatureMap]): L+1 maps, level 0 first.
    """

    __slots__ = ("maps",)

    def __init__(self, maps: Sequence[FeatureMap]):
        self.maps = tuple(maps)

    def __getitem__(self, level: int) -> FeatureMap:
        return self.maps[level]

    def __len__(self) -> int:
        return len(self.maps)

    def __iter__(self):
        return iter(self.maps)

    def check(self, spec: PyramidSpec):
        """
        Raises:
            ShapeMismatchError: wrong length or a map of the wrong shape.
        """
        if len(self.maps) != spec.levels + 1:
            raise ShapeMismatchError(
                f"Front column has {len(self.maps)} maps for {spec.levels} levels"
            )
        for level, node in enumerate(self.maps):
            expected = (spec.level_channels(level),) + spec.level_dims(level)
            if node.data.shape != expected:
                raise ShapeMismatchError(
                    f"Front node {level} has shape {node.data.shape}, expected {expected}"
                )


def encode_conv(
    weights: Weights, level: int, f_prev_lag: FeatureMap, f_prev_new: FeatureMap
) -> FeatureMap:
    """c_l(tau) from f_{l-1}(tau - s_l) and f_{l-1}(tau)."""
    stage = weights.encoder_level(level)
    return norm_act(conv_pair(f_prev_lag, f_prev_new, stage.kernel), stage.norm)


def pool_node(c_lag: FeatureMap, c_new: FeatureMap) -> FeatureMap:
    """f_l(tau) from c_l(tau - s_l) and c_l(tau)."""
    return spatial_pool(temporal_max(c_lag, c_new))


def encode_front(
    spec: PyramidSpec,
    weights: Weights,
    level: int,
    f_prev_new: FeatureMap,
    f_prev_lag: FeatureMap,
    c_lag: FeatureMap,
) -> Tuple[FeatureMap, FeatureMap]:
    """
    Advance one level of the front: the single recurrence every engine uses.

    Args:
        spec (PyramidSpec): the architecture.
        weights (Weights): the parameters.
        level (int): l in 1 .. L.
        f_prev_new (FeatureMap): f_{l-1}(t).
        f_prev_lag (FeatureMap): f_{l-1}(t - s_l).
        c_lag (FeatureMap): c_l(t - s_l).

    Returns:
        (FeatureMap, FeatureMap): c_l(t) and f_l(t).

    Raises:
        ShapeMismatchError: an input does not have the level-(l-1) shape.
    """
    if not 1 <= level <= spec.levels:
        raise ShapeMismatchError(f"Level {level} outside 1..{spec.levels}")
    expected = (spec.level_channels(level - 1),) + spec.level_dims(level - 1)
    for name, node in (("f_prev_new", f_prev_new), ("f_prev_lag", f_prev_lag)):
        if node.data.shape != expected:
            raise ShapeMismatchError(
                f"Level {level} {name} has shape {node.data.shape}, expected {expected}"
            )
    c_new = encode_conv(weights, level, f_prev_lag, f_prev_new)
    return c_new, pool_node(c_lag, c_new)


def decode_logits(spec: PyramidSpec, weights: Weights, front: FrontColumn) -> FeatureMap:
    """Classifier scores for the latest frame, before the argmax."""
    front.check(spec)
    decoded = front[spec.levels]
    for level in range(spec.levels, 0, -1):
        stage = weights.decoder_level(level)
        merged = concat_channels(upsample_nearest(decoded), front[level - 1])
        decoded = norm_act(conv_spatial(merged, stage.kernel), stage.norm)
    return conv_spatial(decoded, weights.classifier)


def decode_latest(spec: PyramidSpec, weights: Weights, front: FrontColumn) -> LabelMap:
    """
    Labels of the latest frame from its front column.

    Returns:
        LabelMap: level-0 spatial dims.

    Raises:
        ShapeMismatchError: the front column or the weights do not fit the pyramid.
    """
    return argmax_channels(decode_logits(spec, weights, front))


def decoder_mults(spec: PyramidSpec, weights: Weights) -> List[int]:
    """
    Scalar multiply-adds of one decode, per output level 0 .. L.

    Decoder stage l writes level l-1; the classifier is charged to level 0.
    """
    per_level = [0] * (spec.levels + 1)
    for level in range(1, spec.levels + 1):
        per_level[level - 1] += weights.decoder_level(level).kernel.mults(
            spec.level_cells(level - 1)
        )
    per_level[0] += weights.classifier.mults(spec.level_cells(0))
    return per_level
