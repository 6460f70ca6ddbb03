"""Patch, naive shift and shift-memory evaluation engines, plus the lockstep verifier.

All three engines evaluate the same recurrence (`encode_conv` + `pool_node`);
they differ only in which earlier node values they keep:

    patch   re-derives every node from raw frames, one output every T frames
    shift   re-evaluates the whole causal window every frame, memoised per frame
    smn     keeps s_l + 1 copies of f_{l-1} and c_l per level in circular rings

One engine instance is single-writer: `step` calls must be serialised by the
caller. Separate instances share nothing.
"""

from collections import deque
from dataclasses import dataclass
from itertools import islice
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from byoa.telemetry.log_manager.log_manager import LogManager

from schemas.output_schema import Divergence, VerificationReport
from shift_memory_segmentation.exceptions import (
    FormatError,
    InsufficientHistoryError,
    ShapeMismatchError,
)
from shift_memory_segmentation.metering import MeterSnapshot, OpMeter
from shift_memory_segmentation.pyramid_mode import EngineKind, FrameStatus
from shift_memory_segmentation.pyramid_model import (
    FrontColumn,
    PyramidSpec,
    Weights,
    decode_latest,
    decoder_mults,
    encode_conv,
    encode_front,
    lag,
    pool_node,
    receptive_field,
)
from shift_memory_segmentation.tensor_core import (
    FeatureMap,
    LabelMap,
    check_finite,
    first_difference,
)

logger = LogManager.get_instance()


@dataclass(frozen=True)
class EngineOutput:
    """
    Result of one engine step.

    Attributes:
        frame_index (int): zero-based index of the frame just consumed.
        status (FrameStatus): WARMING, READY or IDLE (patch driver only).
        labels (LabelMap, optional): labels of this frame, READY only.
        front (FrontColumn, optional): f_0(t) .. f_L(t), READY only.
        meter (MeterSnapshot): work done during this step.
    """

    frame_index: int
    status: FrameStatus
    labels: Optional[LabelMap]
    front: Optional[FrontColumn]
    meter: MeterSnapshot

    @property
    def ready(self) -> bool:
        return self.status is FrameStatus.READY


class RingBuffer:
    """
    Fixed-capacity circular store. The cursor moves one slot per push; nothing
    is physically shifted. `None` marks a slot whose value is not defined yet.

    Args:
        capacity (int): number of slots.
    """

    __slots__ = ("capacity", "slots", "cursor", "filled")

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.slots: List[Optional[FeatureMap]] = [None] * capacity
        self.cursor = 0
        self.filled = 0

    def push(self, value: Optional[FeatureMap]):
        self.slots[self.cursor] = value
        self.cursor = (self.cursor + 1) % self.capacity
        self.filled = min(self.filled + 1, self.capacity)

    def peek(self, lag_frames: int) -> Optional[FeatureMap]:
        """Value pushed `lag_frames` pushes ago (0 = newest), None when not held."""
        if not 0 <= lag_frames < self.filled:
            return None
        return self.slots[(self.cursor - 1 - lag_frames) % self.capacity]

    def replace(self, lag_frames: int, value: FeatureMap):
        if not 0 <= lag_frames < self.filled:
            raise IndexError(f"Ring holds {self.filled} values, lag {lag_frames} requested")
        self.slots[(self.cursor - 1 - lag_frames) % self.capacity] = value

    def held(self) -> Iterator[FeatureMap]:
        return (value for value in self.slots if value is not None)


class LevelState:
    """
    Shift memory of one level l: f_{l-1} and c_l over the last s_l + 1 frames.

    Args:
        level (int): l in 1 .. L.
    """

    __slots__ = ("level", "lag", "f_ring", "c_ring")

    def __init__(self, level: int):
        self.level = level
        self.lag = lag(level)
        self.f_ring = RingBuffer(self.lag + 1)
        self.c_ring = RingBuffer(self.lag + 1)


class Engine:
    """
    Common driver: frame validation, warm-up bookkeeping, decoding and metering.

    Subclasses implement `_advance`, which consumes one frame and returns the
    front column when this frame produces output.

    Args:
        spec (PyramidSpec): the architecture.
        weights (Weights): parameters fitting `spec`.
    """

    kind: EngineKind

    def __init__(self, spec: PyramidSpec, weights: Weights):
        weights.check(spec)
        self.spec = spec
        self.weights = weights
        self.warmup_frames = receptive_field(spec.levels) - 1
        self.meter = OpMeter(spec.levels)
        self._frame_shape = (spec.in_channels,) + spec.frame_dims
        self._decoder_mults = decoder_mults(spec, weights)
        self.reset()
        logger.info(f"{self.kind.value} engine created for {spec.describe()}")

    def reset(self):
        """Forget every frame seen; the next step is frame 0 again."""
        self.frame_index = 0
        self.meter.reset()
        self._reset_buffers()

    def _reset_buffers(self):
        raise NotImplementedError

    def _advance(self, frame: FeatureMap, t: int) -> Tuple[FrameStatus, Optional[FrontColumn]]:
        raise NotImplementedError

    def held_maps(self) -> Iterator[Tuple[int, FeatureMap]]:
        """Every live buffered map with the level it is accounted to."""
        raise NotImplementedError

    def step(self, frame: FeatureMap) -> EngineOutput:
        """
        Consume the next frame of the stream.

        Raises:
            ShapeMismatchError: the frame does not have (in_channels, *frame dims).
            NonFiniteValueError: the frame holds NaN or Inf.
        """
        if frame.data.shape != self._frame_shape:
            raise ShapeMismatchError(
                f"Frame {self.frame_index} has shape {frame.data.shape}, "
                f"expected {self._frame_shape}"
            )
        check_finite(frame, f"frame {self.frame_index}")
        t = self.frame_index
        self.meter.start_frame()
        status, front = self._advance(frame, t)
        labels = None
        if status is FrameStatus.READY:
            labels = decode_latest(self.spec, self.weights, front)
            self.meter.record_levels(self._decoder_mults)
        else:
            front = None
        snapshot = self.meter.end_frame(t)
        if t == self.warmup_frames:
            logger.info(f"{self.kind.value} engine warm-up completed at frame {t}")
        self.frame_index += 1
        return EngineOutput(t, status, labels, front, snapshot)

    def run(self, frames: Iterable[FeatureMap]) -> Iterator[EngineOutput]:
        """Step through `frames` lazily."""
        for frame in frames:
            yield self.step(frame)


def _frame_at(frames: Sequence[FeatureMap], time: int, level: int, needed: int) -> FeatureMap:
    if time < 0:
        raise InsufficientHistoryError(level, time, needed)
    try:
        return frames[time]
    except (IndexError, KeyError) as exc:
        raise InsufficientHistoryError(level, time, needed) from exc


def oracle_node(
    spec: PyramidSpec,
    weights: Weights,
    level: int,
    t: int,
    frames: Sequence[FeatureMap],
    meter: Optional[OpMeter] = None,
) -> FeatureMap:
    """
    f_level(t) straight from the definition, with no caching of any kind.

    Args:
        spec (PyramidSpec): the architecture.
        weights (Weights): the parameters.
        level (int): 0 .. L.
        t (int): time of the node; `frames[t]` is the raw frame at time t.
        frames (Sequence[FeatureMap]): random-access raw frames.
        meter (OpMeter, optional): charged with every evaluation, redundant ones included.

    Raises:
        InsufficientHistoryError: t < R_level - 1 or a frame is missing.
    """
    needed = receptive_field(level)
    if t < needed - 1:
        raise InsufficientHistoryError(level, t, needed)

    def f_node(node_level: int, time: int) -> FeatureMap:
        if node_level == 0:
            if meter is not None:
                meter.record(0, cells=spec.level_cells(0))
            return _frame_at(frames, time, level, needed)
        s = lag(node_level)
        c_new = c_node(node_level, time)
        c_lag = c_node(node_level, time - s)
        if meter is not None:
            meter.record(node_level, cells=spec.level_cells(node_level))
        return pool_node(c_lag, c_new)

    def c_node(node_level: int, time: int) -> FeatureMap:
        s = lag(node_level)
        f_new = f_node(node_level - 1, time)
        f_lag = f_node(node_level - 1, time - s)
        if meter is not None:
            kernel = weights.encoder_level(node_level).kernel
            meter.record(node_level, mults=kernel.mults(spec.level_cells(node_level - 1)))
        return encode_conv(weights, node_level, f_lag, f_new)

    return f_node(level, t)


def _patch_front(
    spec: PyramidSpec,
    weights: Weights,
    window: Sequence[FeatureMap],
    meter: Optional[OpMeter] = None,
) -> FrontColumn:
    needed = receptive_field(spec.levels)
    if len(window) < needed:
        raise InsufficientHistoryError(spec.levels, len(window) - 1, needed)
    t = len(window) - 1
    return FrontColumn(
        [oracle_node(spec, weights, level, t, window, meter) for level in range(spec.levels + 1)]
    )


def patch_infer(spec: PyramidSpec, weights: Weights, window: Sequence[FeatureMap]) -> LabelMap:
    """
    Labels of the last frame of `window` (oldest first, at least R_L frames).

    Raises:
        InsufficientHistoryError: the window is shorter than R_L frames.
    """
    return decode_latest(spec, weights, _patch_front(spec, weights, window))


class PatchEngine(Engine):
    """
    Patch-mode driver: buffers R_L raw frames and emits one output every T
    frames, at window-end times. Other frames after warm-up are IDLE.
    """

    kind = EngineKind.PATCH

    def _reset_buffers(self):
        self._window: deque = deque(maxlen=receptive_field(self.spec.levels))

    def _advance(self, frame, t):
        self._window.append(frame)
        if t < self.warmup_frames:
            return FrameStatus.WARMING, None
        if (t - self.warmup_frames) % self.spec.frames:
            return FrameStatus.IDLE, None
        return FrameStatus.READY, _patch_front(self.spec, self.weights, self._window, self.meter)

    def held_maps(self):
        for frame in self._window:
            yield 0, frame


class ShiftEngine(Engine):
    """
    Naive shift mode: every frame the whole causal window of R_L raw frames is
    evaluated again, each node at most once per frame.

    Level-l nodes whose time lies in the last T frames count as `cells`; the
    older ones the recurrence also needs count as `halo_cells`.
    """

    kind = EngineKind.SHIFT

    def _reset_buffers(self):
        self._window: deque = deque(maxlen=receptive_field(self.spec.levels))
        self._f_memo: List[Dict[int, FeatureMap]] = [{} for _ in range(self.spec.levels + 1)]
        self._c_memo: List[Dict[int, FeatureMap]] = [{} for _ in range(self.spec.levels + 1)]

    def _advance(self, frame, t):
        self._window.append(frame)
        for memo in self._f_memo + self._c_memo:
            memo.clear()
        if t < self.warmup_frames:
            return FrameStatus.WARMING, None

        spec = self.spec
        span = spec.frames
        oldest = t - len(self._window) + 1
        self._f_memo[0] = {oldest + i: held for i, held in enumerate(self._window)}
        self.meter.record(
            0,
            cells=span * spec.level_cells(0),
            halo_cells=(len(self._window) - span) * spec.level_cells(0),
        )
        for level in range(1, spec.levels + 1):
            s = lag(level)
            f_below = self._f_memo[level - 1]
            c_level = self._c_memo[level]
            f_level = self._f_memo[level]
            kernel_mults = self.weights.encoder_level(level).kernel.mults(
                spec.level_cells(level - 1)
            )
            for time in sorted(f_below, reverse=True):
                if time - s in f_below:
                    c_level[time] = encode_conv(
                        self.weights, level, f_below[time - s], f_below[time]
                    )
                    self.meter.record(level, mults=kernel_mults)
            cells = spec.level_cells(level)
            stride = 2 ** level
            for j in range(2 ** (spec.levels - level + 1) - 1):
                time = t - j * stride
                f_level[time] = pool_node(c_level[time - s], c_level[time])
                if j < span // stride:
                    self.meter.record(level, cells=cells)
                else:
                    self.meter.record(level, halo_cells=cells)
        return FrameStatus.READY, FrontColumn(
            [self._f_memo[level][t] for level in range(spec.levels + 1)]
        )

    def window_node(self, level: int, time: int) -> FeatureMap:
        """
        f_level(time) as evaluated for the last processed frame.

        Raises:
            InsufficientHistoryError: the node is not part of the last window.
        """
        try:
            return self._f_memo[level][time]
        except (IndexError, KeyError) as exc:
            raise InsufficientHistoryError(
                level, time, receptive_field(level)
            ) from exc

    def held_maps(self):
        for frame in self._window:
            yield 0, frame
        for level in range(1, self.spec.levels + 1):
            for node in self._f_memo[level].values():
                yield level, node
            for node in self._c_memo[level].values():
                yield level, node


class SmnEngine(Engine):
    """
    Shift-memory engine: one conv and one pool per level per frame, reading the
    lagged inputs from the level's circular memories.
    """

    kind = EngineKind.SMN

    def _reset_buffers(self):
        self.states = [LevelState(level) for level in range(1, self.spec.levels + 1)]
        self.last_front: List[Optional[FeatureMap]] = [None] * (self.spec.levels + 1)

    def _advance(self, frame, t):
        spec = self.spec
        self.meter.record(0, cells=spec.level_cells(0))
        front: List[Optional[FeatureMap]] = [frame]
        f_prev: Optional[FeatureMap] = frame
        for state in self.states:
            level, s = state.level, state.lag
            state.f_ring.push(f_prev)
            f_lag = state.f_ring.peek(s)
            # c_l(t - s) sits at lag s - 1 until c_l(t) is pushed
            c_lag = state.c_ring.peek(s - 1)
            c_new = f_new = None
            if f_prev is not None and f_lag is not None:
                if c_lag is not None:
                    c_new, f_new = encode_front(spec, self.weights, level, f_prev, f_lag, c_lag)
                    self.meter.record(level, cells=spec.level_cells(level))
                else:
                    c_new = encode_conv(self.weights, level, f_lag, f_prev)
                kernel = self.weights.encoder_level(level).kernel
                self.meter.record(level, mults=kernel.mults(spec.level_cells(level - 1)))
            state.c_ring.push(c_new)
            front.append(f_new)
            f_prev = f_new
        self.last_front = front
        if t < self.warmup_frames:
            return FrameStatus.WARMING, None
        return FrameStatus.READY, FrontColumn(front)

    def corrupt_slot(self, level: int, lag_frames: int, ring: str = "c", delta: float = 100.0):
        """
        Add `delta` to every value of one stored map, for fault injection.

        Args:
            level (int): l in 1 .. L.
            lag_frames (int): 0 for the value stored by the last step.
            ring (str): "f" (the f_{l-1} ring) or "c" (the c_l ring).
            delta (float): amount added.

        Raises:
            ValueError: unknown ring or level, or nothing stored at that lag.
        """
        if not 1 <= level <= self.spec.levels:
            raise ValueError(f"Level {level} outside 1..{self.spec.levels}")
        if ring not in ("f", "c"):
            raise ValueError(f"Unknown ring '{ring}', expected 'f' or 'c'")
        state = self.states[level - 1]
        target = state.f_ring if ring == "f" else state.c_ring
        held = target.peek(lag_frames)
        if held is None:
            raise ValueError(
                f"No value stored in the level {level} {ring} ring at lag {lag_frames}"
            )
        target.replace(lag_frames, FeatureMap(held.data + np.float32(delta)))
        logger.info(f"Corrupted level {level} {ring} ring at lag {lag_frames} by {delta}")

    def held_maps(self):
        for state in self.states:
            for ring in (state.f_ring, state.c_ring):
                for held in ring.held():
                    yield state.level, held


_ENGINES = {
    EngineKind.PATCH: PatchEngine,
    EngineKind.SHIFT: ShiftEngine,
    EngineKind.SMN: SmnEngine,
}


def create_engine(kind: EngineKind, spec: PyramidSpec, weights: Weights) -> Engine:
    """Instantiate the engine registered for `kind` ("patch", "shift" or "smn")."""
    return _ENGINES[EngineKind(kind)](spec, weights)


@dataclass(frozen=True)
class RingCorruption:
    """
    Fault to inject into the shift-memory engine right after `frame` is consumed.

    Attributes:
        frame (int): frame index after which the slot is corrupted.
        level (int): ring level.
        ring (str): "f" or "c".
        lag (int): slot lag, 0 = value stored at `frame`.
        delta (float): amount added to the stored map.
    """

    frame: int
    level: int
    ring: str = "c"
    lag: int = 0
    delta: float = 100.0


def _compare_fronts(t: int, expected: FrontColumn, actual: FrontColumn) -> Optional[Divergence]:
    for level, (left, right) in enumerate(zip(expected, actual)):
        cell = first_difference(left, right)
        if cell is not None:
            return Divergence(frame=t, level=level, cell=cell, detail=f"front node f_{level}")
    return None


def _compare_labels(t: int, expected: LabelMap, actual: LabelMap) -> Optional[Divergence]:
    diff = np.flatnonzero(expected.labels.ravel() != actual.labels.ravel())
    if diff.size:
        return Divergence(frame=t, cell=int(diff[0]), detail="labels")
    return None


def _check_period(
    spec: PyramidSpec,
    shift: ShiftEngine,
    history: Dict[int, List[Optional[FeatureMap]]],
    t: int,
) -> Tuple[int, Optional[Divergence]]:
    """Window nodes of frame t against the front nodes computed 2**l * k frames earlier."""
    checks = 0
    for level in range(1, spec.levels + 1):
        stride = 2 ** level
        for k in range(1, spec.frames // stride):
            time = t - stride * k
            front = history.get(time)
            if front is None or front[level] is None:
                continue
            checks += 1
            cell = first_difference(shift.window_node(level, time), front[level])
            if cell is not None:
                return checks, Divergence(
                    frame=t,
                    level=level,
                    cell=cell,
                    detail=f"window node f_{level}({time}) against the front of frame {time}",
                )
    return checks, None


def verify_equivalence(
    spec: PyramidSpec,
    weights: Weights,
    stream: Iterable[FeatureMap],
    n_frames: int,
    period_check: bool = True,
    corruption: Optional[RingCorruption] = None,
) -> VerificationReport:
    """
    Run the shift and shift-memory engines in lockstep and compare them bitwise.

    Every READY frame compares the front columns (level 0 first) then the
    labels. With `period_check` the shift engine's window nodes are also
    compared with the shift-memory front nodes of earlier frames. Comparison
    stops at the first divergence.

    Args:
        spec (PyramidSpec): the architecture.
        weights (Weights): the parameters.
        stream (Iterable[FeatureMap]): frames, consumed up to `n_frames`.
        n_frames (int): frames to compare, more than R_L.
        period_check (bool): also check the window periodicity.
        corruption (RingCorruption, optional): fault injected into the shift-memory engine.

    Returns:
        VerificationReport: outcome with the first divergence, if any.

    Raises:
        ValueError: n_frames <= R_L.
        FormatError: the stream ends before `n_frames` frames.
    """
    needed = receptive_field(spec.levels)
    if n_frames <= needed:
        raise ValueError(f"Verification needs more than {needed} frames, got {n_frames}")
    shift = ShiftEngine(spec, weights)
    smn = SmnEngine(spec, weights)
    history: Dict[int, List[Optional[FeatureMap]]] = {}
    frames_compared = ready = checks = 0
    divergence = period_divergence = None

    for frame in islice(stream, n_frames):
        expected = shift.step(frame)
        actual = smn.step(frame)
        t = expected.frame_index
        frames_compared += 1
        history[t] = smn.last_front
        history.pop(t - spec.frames, None)
        if corruption is not None and t == corruption.frame:
            smn.corrupt_slot(corruption.level, corruption.lag, corruption.ring, corruption.delta)

        if expected.status is not actual.status:
            divergence = Divergence(
                frame=t,
                cell=0,
                detail=f"status {expected.status.value} against {actual.status.value}",
            )
            break
        if not expected.ready:
            continue
        ready += 1
        divergence = _compare_fronts(t, expected.front, actual.front) or _compare_labels(
            t, expected.labels, actual.labels
        )
        if divergence is not None:
            break
        if period_check:
            done, period_divergence = _check_period(spec, shift, history, t)
            checks += done
            if period_divergence is not None:
                break
    else:
        if frames_compared < n_frames:
            logger.error(f"Stream ended after {frames_compared} of {n_frames} frames")
            raise FormatError(
                f"Stream holds {frames_compared} frames, {n_frames} requested",
                frame_index=frames_compared,
            )

    report = VerificationReport(
        equivalent=divergence is None and period_divergence is None,
        frames_compared=frames_compared,
        ready_frames=ready,
        period_checks=checks,
        first_divergence=divergence,
        period_divergence=period_divergence,
    )
    if report.equivalent:
        logger.info(
            f"Engines equivalent over {frames_compared} frames "
            f"({ready} ready, {checks} period checks)"
        )
    else:
        logger.info(f"Engines diverged: {divergence or period_divergence}")
    return report
