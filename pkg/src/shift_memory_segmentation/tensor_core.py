"""Deterministic dense kernels over channel-major float32 maps.

Every convolution reduces its products with one fixed order per output cell:
input channel (outer), then temporal tap, then spatial taps in row-major
order, summed sequentially in float32 with the bias added last. Work is
vectorised across output cells and output channels only, so the three engines
agree bit for bit.
"""

from dataclasses import dataclass, field
from math import prod
from typing import Optional, Tuple

import numpy as np

from shift_memory_segmentation.exceptions import NonFiniteValueError, ShapeMismatchError

FLOAT = np.float32


class FeatureMap:
    """
    A dense map of float32 values, shape (channels, *spatial_dims).

    Spatial dims are (width,) for lines and (height, width) for frames. The
    underlying array is made read-only: kernels always return new maps.

    Args:
        data (np.ndarray): channel-major array; converted to contiguous float32.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        array = np.ascontiguousarray(data, dtype=FLOAT)
        if array.ndim not in (2, 3):
            raise ShapeMismatchError(
                f"FeatureMap needs 1 or 2 spatial dims, got array of shape {array.shape}"
            )
        if min(array.shape[1:]) <= 0:
            raise ShapeMismatchError(f"Empty spatial dims {array.shape[1:]}")
        array.flags.writeable = False
        self.data = array

    @classmethod
    def zeros(cls, channels: int, spatial_dims: Tuple[int, ...]) -> "FeatureMap":
        """All-zero map of the given shape."""
        return cls(np.zeros((channels,) + tuple(spatial_dims), dtype=FLOAT))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_dims(self) -> Tuple[int, ...]:
        return self.data.shape[1:]

    @property
    def rank(self) -> int:
        """Number of spatial dims (1 for lines, 2 for frames)."""
        return self.data.ndim - 1

    @property
    def cells(self) -> int:
        """Channel-free spatial cell count."""
        return prod(self.spatial_dims)

    @property
    def scalars(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"FeatureMap(channels={self.channels}, spatial_dims={self.spatial_dims})"


@dataclass(frozen=True, eq=False)
class ConvKernel:
    """
    Convolution weights in the layout [out][in][temporal tap][spatial taps].

    Attributes:
        weights (np.ndarray): float32, shape (out, in, temporal_taps, spatial_taps ** rank).
        bias (np.ndarray): float32, shape (out,).
        spatial_taps (int): taps per spatial dim, 2 for pyramid convs, 1 for the classifier.
        rank (int): number of spatial dims the kernel slides over.
    """

    weights: np.ndarray
    bias: np.ndarray
    spatial_taps: int
    rank: int
    stack: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        weights = np.ascontiguousarray(self.weights, dtype=FLOAT)
        bias = np.ascontiguousarray(self.bias, dtype=FLOAT)
        if weights.ndim != 4:
            raise ShapeMismatchError(f"Kernel weights must be 4-d, got shape {weights.shape}")
        if weights.shape[3] != self.spatial_taps**self.rank:
            raise ShapeMismatchError(
                f"Kernel has {weights.shape[3]} spatial taps, expected "
                f"{self.spatial_taps}^{self.rank}"
            )
        if bias.shape != (weights.shape[0],):
            raise ShapeMismatchError(
                f"Bias length {bias.shape} does not match {weights.shape[0]} output channels"
            )
        weights.flags.writeable = False
        bias.flags.writeable = False
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)
        # (taps, out): row k is the k-th term of every output cell's sum
        stack = np.ascontiguousarray(weights.reshape(weights.shape[0], -1).T)
        stack.flags.writeable = False
        object.__setattr__(self, "stack", stack)

    @classmethod
    def from_flat(
        cls,
        out_channels: int,
        in_channels: int,
        temporal_taps: int,
        spatial_taps: int,
        rank: int,
        weights,
        bias,
    ) -> "ConvKernel":
        """Build a kernel from flat arrays in serialisation order."""
        shape = (out_channels, in_channels, temporal_taps, spatial_taps**rank)
        flat = np.asarray(weights, dtype=FLOAT)
        if flat.size != prod(shape):
            raise ShapeMismatchError(f"Expected {prod(shape)} kernel weights, got {flat.size}")
        return cls(flat.reshape(shape), np.asarray(bias, dtype=FLOAT), spatial_taps, rank)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def temporal_taps(self) -> int:
        return self.weights.shape[2]

    @property
    def taps_per_output(self) -> int:
        """Products summed into one output cell."""
        return self.stack.shape[0]

    def mults(self, cells: int) -> int:
        """Scalar multiply-adds to produce a map with `cells` spatial cells."""
        return self.taps_per_output * self.out_channels * cells


@dataclass(frozen=True, eq=False)
class NormParams:
    """
    Inference-time normalisation parameters for one map.

    Attributes:
        gamma, beta, mean, variance (np.ndarray): float32 per-channel arrays.
        epsilon (float): stabiliser added to the variance.
    """

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        arrays = {}
        for name in ("gamma", "beta", "mean", "variance"):
            array = np.ascontiguousarray(getattr(self, name), dtype=FLOAT)
            if array.ndim != 1:
                raise ShapeMismatchError(f"Norm {name} must be 1-d, got shape {array.shape}")
            array.flags.writeable = False
            arrays[name] = array
        if len({array.size for array in arrays.values()}) != 1:
            raise ShapeMismatchError("Norm gamma/beta/mean/variance lengths differ")
        if np.any(arrays["variance"] < 0):
            raise ValueError("Norm variance must be non-negative")
        for name, array in arrays.items():
            object.__setattr__(self, name, array)
        object.__setattr__(self, "epsilon", FLOAT(self.epsilon))

    @classmethod
    def identity(cls, channels: int, epsilon: float = 1e-5) -> "NormParams":
        """gamma=1, beta=0, mean=0, variance=1."""
        return cls(
            np.ones(channels, FLOAT),
            np.zeros(channels, FLOAT),
            np.zeros(channels, FLOAT),
            np.ones(channels, FLOAT),
            epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.size


@dataclass(frozen=True, eq=False)
class LabelMap:
    """
    Per-cell class decisions for one frame.

    Attributes:
        labels (np.ndarray): uint8 array with the level-0 spatial dims.
        num_classes (int): number of classes the labels were drawn from.
    """

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if labels.size and int(labels.max()) >= self.num_classes:
            raise ValueError(
                f"Label {int(labels.max())} out of range for {self.num_classes} classes"
            )
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def spatial_dims(self) -> Tuple[int, ...]:
        return self.labels.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(
            self.labels, other.labels
        )

    def tobytes(self) -> bytes:
        """Row-major u8 payload."""
        return self.labels.tobytes(order="C")


def check_finite(m: FeatureMap, what: str = "feature map"):
    """
    Reject maps holding NaN or Inf.

    Raises:
        NonFiniteValueError: If any value is not finite.
    """
    if not np.isfinite(m.data).all():
        raise NonFiniteValueError(what)


def _require_same_shape(a: FeatureMap, b: FeatureMap, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def _spatial_taps(m: FeatureMap, spatial_taps: int) -> np.ndarray:
    """
    Shifted copies of `m` for each spatial tap, zero-padded on the high edge.

    Returns:
        np.ndarray: shape (channels, spatial_taps ** rank, cells).
    """
    x = m.data
    channels = x.shape[0]
    if spatial_taps == 1:
        return x.reshape(channels, 1, -1)
    if spatial_taps != 2:
        raise ShapeMismatchError(f"Unsupported spatial tap count {spatial_taps}")
    if m.rank == 1:
        width = x.shape[1]
        padded = np.pad(x, ((0, 0), (0, 1)))
        return np.stack([padded[:, dx : dx + width] for dx in (0, 1)], axis=1)
    height, width = x.shape[1:]
    padded = np.pad(x, ((0, 0), (0, 1), (0, 1)))
    taps = [padded[:, dy : dy + height, dx : dx + width] for dy in (0, 1) for dx in (0, 1)]
    return np.stack(taps, axis=1).reshape(channels, 4, height * width)


def _ordered_sum(terms: np.ndarray, k: ConvKernel, spatial_dims: Tuple[int, ...]) -> FeatureMap:
    """
    Reduce the ordered term stack with a sequential float32 running sum.

    Args:
        terms (np.ndarray): shape (taps_per_output, cells), inputs in kernel order.
        k (ConvKernel): the kernel whose `stack` rows pair with `terms` rows.
        spatial_dims: output spatial dims.
    """
    products = k.stack[:, :, None] * terms[:, None, :]
    acc = np.add.accumulate(products, axis=0, dtype=FLOAT)[-1]
    out = acc + k.bias[:, None]
    return FeatureMap(out.reshape((k.out_channels,) + tuple(spatial_dims)))


def conv_pair(f_lag: FeatureMap, f_new: FeatureMap, k: ConvKernel) -> FeatureMap:
    """
    Two-tap temporal convolution between a lagged node and the newest node.

    Temporal tap 0 reads `f_lag`, tap 1 reads `f_new`. Spatial taps are
    zero-padded on the high-index edge so the output keeps the input dims.

    Args:
        f_lag (FeatureMap): the key node, `s` frames older.
        f_new (FeatureMap): the newest node.
        k (ConvKernel): kernel with two temporal taps.

    Returns:
        FeatureMap: k.out_channels channels, same spatial dims.

    Raises:
        ShapeMismatchError: shapes or channel counts disagree.
        NonFiniteValueError: an input holds NaN or Inf.
    """
    _require_same_shape(f_lag, f_new, "conv_pair")
    if k.temporal_taps != 2:
        raise ShapeMismatchError(f"conv_pair needs 2 temporal taps, kernel has {k.temporal_taps}")
    if k.in_channels != f_new.channels:
        raise ShapeMismatchError(
            f"conv_pair: kernel expects {k.in_channels} channels, map has {f_new.channels}"
        )
    if k.spatial_taps > 1 and k.rank != f_new.rank:
        raise ShapeMismatchError(f"conv_pair: kernel rank {k.rank}, map rank {f_new.rank}")
    check_finite(f_lag, "conv_pair lagged input")
    check_finite(f_new, "conv_pair newest input")
    taps = np.stack(
        [_spatial_taps(f_lag, k.spatial_taps), _spatial_taps(f_new, k.spatial_taps)], axis=1
    )
    return _ordered_sum(taps.reshape(-1, f_new.cells), k, f_new.spatial_dims)


def conv_spatial(m: FeatureMap, k: ConvKernel) -> FeatureMap:
    """
    Single-frame convolution used by the decoder and the 1x1 classifier.

    Raises:
        ShapeMismatchError: kernel and map disagree.
    """
    if k.temporal_taps != 1:
        raise ShapeMismatchError(
            f"conv_spatial needs 1 temporal tap, kernel has {k.temporal_taps}"
        )
    if k.in_channels != m.channels:
        raise ShapeMismatchError(
            f"conv_spatial: kernel expects {k.in_channels} channels, map has {m.channels}"
        )
    if k.spatial_taps > 1 and k.rank != m.rank:
        raise ShapeMismatchError(f"conv_spatial: kernel rank {k.rank}, map rank {m.rank}")
    check_finite(m, "conv_spatial input")
    return _ordered_sum(_spatial_taps(m, k.spatial_taps).reshape(-1, m.cells), k, m.spatial_dims)


def norm_act(m: FeatureMap, p: NormParams) -> FeatureMap:
    """
    y = gamma * (x - mean) / sqrt(variance + epsilon) + beta, then max(y, 0).

    Raises:
        ShapeMismatchError: channel counts differ.
    """
    if p.channels != m.channels:
        raise ShapeMismatchError(
            f"norm_act: {p.channels} norm channels for a {m.channels}-channel map"
        )
    shape = (-1,) + (1,) * m.rank
    scale = np.sqrt(p.variance + p.epsilon).reshape(shape)
    y = p.gamma.reshape(shape) * (m.data - p.mean.reshape(shape))
    y = y / scale + p.beta.reshape(shape)
    return FeatureMap(np.maximum(y, FLOAT(0.0)))


def temporal_max(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    """Elementwise maximum of two nodes of the same shape."""
    _require_same_shape(a, b, "temporal_max")
    return FeatureMap(np.maximum(a.data, b.data))


def spatial_pool(m: FeatureMap) -> FeatureMap:
    """
    Stride-2 max pool over each spatial dim.

    Raises:
        ShapeMismatchError: a spatial dim is odd.
    """
    if any(dim % 2 for dim in m.spatial_dims):
        raise ShapeMismatchError(f"spatial_pool needs even dims, got {m.spatial_dims}")
    x = m.data
    if m.rank == 1:
        return FeatureMap(x.reshape(m.channels, -1, 2).max(axis=2))
    height, width = m.spatial_dims
    return FeatureMap(x.reshape(m.channels, height // 2, 2, width // 2, 2).max(axis=(2, 4)))


def upsample_nearest(m: FeatureMap) -> FeatureMap:
    """Replicate every cell into its 2 (line) or 2x2 (frame) block."""
    x = m.data
    for axis in range(1, m.rank + 1):
        x = np.repeat(x, 2, axis=axis)
    return FeatureMap(x)


def concat_channels(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    """
    Stack `b`'s channels after `a`'s.

    Raises:
        ShapeMismatchError: spatial dims differ.
    """
    if a.spatial_dims != b.spatial_dims:
        raise ShapeMismatchError(
            f"concat_channels: spatial dims {a.spatial_dims} and {b.spatial_dims} differ"
        )
    return FeatureMap(np.concatenate([a.data, b.data], axis=0))


def argmax_channels(m: FeatureMap) -> LabelMap:
    """Per-cell index of the largest channel, lowest index on ties."""
    if not 1 <= m.channels <= 256:
        raise ShapeMismatchError(f"argmax_channels needs 1..256 channels, got {m.channels}")
    return LabelMap(np.argmax(m.data, axis=0).astype(np.uint8), m.channels)


def bitwise_equal(a: FeatureMap, b: FeatureMap) -> bool:
    """True when both maps have the same shape and identical float32 bit patterns."""
    return a.data.shape == b.data.shape and np.array_equal(
        a.data.view(np.uint32), b.data.view(np.uint32)
    )


def first_difference(a: FeatureMap, b: FeatureMap) -> Optional[int]:
    """
    Flat channel-major index of the first cell whose bits differ.

    Returns:
        int or None: None when the maps are bitwise equal.

    Raises:
        ShapeMismatchError: shapes differ.
    """
    _require_same_shape(a, b, "first_difference")
    diff = np.flatnonzero(a.data.view(np.uint32).ravel() != b.data.view(np.uint32).ravel())
    return int(diff[0]) if diff.size else None
