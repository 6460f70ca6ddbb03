"""Tests for the patch, shift and shift-memory engines and the lockstep verifier."""

import numpy as np
import pytest

from shift_memory_segmentation.engines import (
    PatchEngine,
    RingBuffer,
    RingCorruption,
    ShiftEngine,
    SmnEngine,
    create_engine,
    oracle_node,
    patch_infer,
    verify_equivalence,
)
from shift_memory_segmentation.exceptions import (
    FormatError,
    InsufficientHistoryError,
    NonFiniteValueError,
    ShapeMismatchError,
)
from shift_memory_segmentation.metering import (
    OpMeter,
    audit,
    expected_front_cells,
    expected_halo_cells,
    expected_oracle_cells,
    expected_recompute_cells,
    expected_shift_memory_cells,
    expected_smn_memory_cells,
)
from shift_memory_segmentation.pyramid_mode import FrameStatus
from shift_memory_segmentation.pyramid_model import init_weights, receptive_field
from shift_memory_segmentation.tensor_core import FeatureMap, bitwise_equal


def _same_output(left, right):
    assert left.status is right.status
    if not left.ready:
        return
    assert np.array_equal(left.labels.labels, right.labels.labels)
    for a, b in zip(left.front, right.front):
        assert bitwise_equal(a, b)


@pytest.fixture
def small(make_spec):
    """LINE L=2 W=8: R_L = 7, T = 4."""
    spec = make_spec("line", 2, 8, channels=[3, 4], num_classes=2)
    return spec, init_weights(spec, seed=3)


class TestRingBuffer:
    def test_push_peek(self):
        ring = RingBuffer(3)
        maps = [FeatureMap(np.full((1, 2), v)) for v in range(5)]
        assert ring.peek(0) is None
        for m in maps:
            ring.push(m)
        assert ring.peek(0) is maps[4] and ring.peek(2) is maps[2]
        assert ring.peek(3) is None
        assert len(list(ring.held())) == 3

    def test_replace(self):
        ring = RingBuffer(2)
        ring.push(FeatureMap(np.zeros((1, 2))))
        ring.replace(0, FeatureMap(np.ones((1, 2))))
        assert ring.peek(0).data.tolist() == [[1.0, 1.0]]
        with pytest.raises(IndexError):
            ring.replace(1, FeatureMap(np.ones((1, 2))))


class TestWarmUp:
    @pytest.mark.parametrize("engine_class", [SmnEngine, ShiftEngine])
    def test_first_ready_frame(self, engine_class, line_spec, line_weights, make_frames):
        engine = engine_class(line_spec, line_weights)
        outputs = list(engine.run(make_frames(line_spec, 20)))
        first = 2 ** (line_spec.levels + 1) - 2
        assert engine.warmup_frames == first
        assert [o.status for o in outputs[:first]] == [FrameStatus.WARMING] * first
        assert all(o.ready for o in outputs[first:])
        assert outputs[0].labels is None and outputs[0].front is None

    def test_patch_statuses(self, line_spec, line_weights, make_frames):
        outputs = list(PatchEngine(line_spec, line_weights).run(make_frames(line_spec, 31)))
        ready = [o.frame_index for o in outputs if o.ready]
        assert ready == [14, 22, 30]
        assert outputs[15].status is FrameStatus.IDLE
        assert outputs[13].status is FrameStatus.WARMING

    def test_zero_frames(self, line_spec, line_weights):
        assert list(SmnEngine(line_spec, line_weights).run([])) == []


class TestEquivalence:
    def test_smn_matches_shift_line(self, line_spec, line_weights, make_frames):
        frames = make_frames(line_spec, 40, seed=2)
        shift = ShiftEngine(line_spec, line_weights)
        smn = SmnEngine(line_spec, line_weights)
        for frame in frames:
            _same_output(shift.step(frame), smn.step(frame))

    def test_smn_matches_shift_video(self, video_spec, video_weights, make_frames):
        frames = make_frames(video_spec, 20, seed=4)
        shift = ShiftEngine(video_spec, video_weights)
        smn = SmnEngine(video_spec, video_weights)
        for frame in frames:
            _same_output(shift.step(frame), smn.step(frame))

    def test_patch_matches_shift_at_window_ends(self, line_spec, line_weights, make_frames):
        frames = make_frames(line_spec, 31, seed=6)
        shift = list(ShiftEngine(line_spec, line_weights).run(frames))
        patch = list(PatchEngine(line_spec, line_weights).run(frames))
        for left, right in zip(shift, patch):
            if right.ready:
                _same_output(left, right)

    def test_patch_infer(self, line_spec, line_weights, make_frames):
        frames = make_frames(line_spec, 15, seed=8)
        last = list(SmnEngine(line_spec, line_weights).run(frames))[-1]
        labels = patch_infer(line_spec, line_weights, frames)
        assert np.array_equal(labels.labels, last.labels.labels)
        with pytest.raises(InsufficientHistoryError):
            patch_infer(line_spec, line_weights, frames[1:])

    def test_oracle_matches_front(self, small, make_frames):
        spec, weights = small
        frames = make_frames(spec, 8, seed=3)
        smn = SmnEngine(spec, weights)
        list(smn.run(frames))
        assert bitwise_equal(oracle_node(spec, weights, 2, 7, frames), smn.last_front[2])
        assert bitwise_equal(oracle_node(spec, weights, 1, 7, frames), smn.last_front[1])
        with pytest.raises(InsufficientHistoryError):
            oracle_node(spec, weights, 2, 5, frames)

    def test_window_nodes_repeat_earlier_fronts(self, line_spec, line_weights, make_frames):
        frames = make_frames(line_spec, 40, seed=5)
        smn = SmnEngine(line_spec, line_weights)
        fronts = {}
        for output in smn.run(frames):
            fronts[output.frame_index] = smn.last_front
        t = len(frames) - 1
        for level in range(line_spec.levels + 1):
            for k in range(1, 4):
                time = t - 2**level * k
                node = oracle_node(line_spec, line_weights, level, time, frames)
                assert bitwise_equal(node, fronts[time][level]), (level, k)

    def test_oracle_meter(self, small, make_frames):
        spec, weights = small
        meter = OpMeter(spec.levels)
        oracle_node(spec, weights, 2, 6, make_frames(spec, 7), meter)
        assert meter.total_cells[2] == 2
        assert meter.total_cells[0] == 16 * 8

    def test_create_engine_by_name(self, line_spec, line_weights):
        assert isinstance(create_engine("smn", line_spec, line_weights), SmnEngine)
        assert isinstance(create_engine("patch", line_spec, line_weights), PatchEngine)
        with pytest.raises(ValueError):
            create_engine("dense", line_spec, line_weights)


class TestStreamingProperties:
    def test_constant_stream_is_time_invariant(self, line_spec, line_weights, make_frames):
        frame = make_frames(line_spec, 1, seed=9)[0]
        outputs = [o for o in SmnEngine(line_spec, line_weights).run([frame] * 24) if o.ready]
        for output in outputs[1:]:
            _same_output(outputs[0], output)

    def test_causality(self, line_spec, line_weights, make_frames):
        shared = make_frames(line_spec, 18, seed=1)
        first = shared + make_frames(line_spec, 6, seed=2)
        second = shared + make_frames(line_spec, 6, seed=3)
        left = list(SmnEngine(line_spec, line_weights).run(first))
        right = list(SmnEngine(line_spec, line_weights).run(second))
        for a, b in zip(left[:18], right[:18]):
            _same_output(a, b)
        assert not np.array_equal(left[18].front[0].data, right[18].front[0].data)

    def test_reset_replays(self, line_spec, line_weights, make_frames):
        frames = make_frames(line_spec, 20, seed=5)
        engine = SmnEngine(line_spec, line_weights)
        before = list(engine.run(frames))
        engine.reset()
        assert engine.frame_index == 0 and engine.meter.frames_seen == 0
        after = list(engine.run(frames))
        for a, b in zip(before, after):
            _same_output(a, b)

    def test_bad_frames(self, line_spec, line_weights):
        engine = SmnEngine(line_spec, line_weights)
        with pytest.raises(ShapeMismatchError):
            engine.step(FeatureMap(np.zeros((1, 8), np.float32)))
        bad = np.zeros((1, 16), np.float32)
        bad[0, 3] = np.inf
        with pytest.raises(NonFiniteValueError):
            engine.step(FeatureMap(bad))


class TestMetering:
    def test_smn_front_cells(self, line_spec, line_weights, make_frames):
        engine = SmnEngine(line_spec, line_weights)
        for output in engine.run(make_frames(line_spec, 24)):
            if output.ready:
                assert output.meter.total_cells == expected_front_cells(line_spec)
                assert output.meter.total_halo_cells == 0

    def test_shift_recompute_cells(self, line_spec, line_weights, make_frames):
        engine = ShiftEngine(line_spec, line_weights)
        for output in engine.run(make_frames(line_spec, 20)):
            if output.ready:
                assert output.meter.total_cells == expected_recompute_cells(line_spec)
                assert output.meter.total_halo_cells == expected_halo_cells(line_spec)

    def test_patch_oracle_cells(self, line_spec, line_weights, make_frames):
        engine = PatchEngine(line_spec, line_weights)
        for output in engine.run(make_frames(line_spec, 23)):
            expected = expected_oracle_cells(line_spec) if output.ready else 0
            assert output.meter.total_cells == expected

    def test_smn_does_less_work(self, line_spec, line_weights, make_frames):
        frames = make_frames(line_spec, 20)
        smn = list(SmnEngine(line_spec, line_weights).run(frames))[-1]
        shift = list(ShiftEngine(line_spec, line_weights).run(frames))[-1]
        assert smn.meter.total_mults < shift.meter.total_mults


class TestMemoryAudit:
    def test_smn_audit_matches_formula(self, line_spec, line_weights, make_frames):
        engine = SmnEngine(line_spec, line_weights)
        expected = expected_smn_memory_cells(line_spec)
        for output in engine.run(make_frames(line_spec, 30)):
            if output.ready:
                census = audit(engine)
                assert census.total_node_cells == expected.node_cells
                assert census.total_scalar_cells == expected.scalar_cells

    def test_smn_audit_video(self, video_spec, video_weights, make_frames):
        engine = SmnEngine(video_spec, video_weights)
        list(engine.run(make_frames(video_spec, 10)))
        assert audit(engine).total_node_cells == expected_smn_memory_cells(video_spec).node_cells

    def test_shift_audit_matches_formula(self, line_spec, line_weights, make_frames):
        engine = ShiftEngine(line_spec, line_weights)
        list(engine.run(make_frames(line_spec, 16)))
        census = audit(engine)
        expected = expected_shift_memory_cells(line_spec)
        assert census.engine == "shift"
        assert census.total_node_cells == expected.node_cells
        assert census.total_scalar_cells == expected.scalar_cells

    def test_patch_holds_window(self, line_spec, line_weights, make_frames):
        engine = PatchEngine(line_spec, line_weights)
        list(engine.run(make_frames(line_spec, 20)))
        window = receptive_field(line_spec.levels)
        assert audit(engine).total_node_cells == window * line_spec.level_cells(0)


class TestVerifyEquivalence:
    def test_equivalent(self, line_spec, line_weights, make_frames):
        report = verify_equivalence(
            line_spec, line_weights, iter(make_frames(line_spec, 40)), 40
        )
        assert report.equivalent
        assert report.frames_compared == 40 and report.ready_frames == 26
        assert report.period_checks > 0
        assert report.first_divergence is None

    def test_without_period_check(self, video_spec, video_weights, make_frames):
        report = verify_equivalence(
            video_spec, video_weights, make_frames(video_spec, 12), 12, period_check=False
        )
        assert report.equivalent and report.period_checks == 0

    @pytest.mark.parametrize("level, frame", [(1, 20), (2, 20), (3, 16)])
    def test_corruption_found_one_lag_later(
        self, line_spec, line_weights, make_frames, level, frame
    ):
        report = verify_equivalence(
            line_spec,
            line_weights,
            make_frames(line_spec, 40),
            40,
            corruption=RingCorruption(frame=frame, level=level),
        )
        assert not report.equivalent
        divergence = report.first_divergence
        assert divergence.frame == frame + 2 ** (level - 1)
        assert divergence.level == level

    def test_needs_more_than_receptive_field(self, line_spec, line_weights, make_frames):
        with pytest.raises(ValueError):
            verify_equivalence(line_spec, line_weights, make_frames(line_spec, 15), 15)

    def test_corrupt_slot_rejects_bad_targets(self, line_spec, line_weights):
        engine = SmnEngine(line_spec, line_weights)
        with pytest.raises(ValueError):
            engine.corrupt_slot(0, 0)
        with pytest.raises(ValueError):
            engine.corrupt_slot(1, 0, ring="x")
        with pytest.raises(ValueError):
            engine.corrupt_slot(1, 0)

    def test_short_stream_is_a_format_error(self, line_spec, line_weights, make_frames):
        with pytest.raises(FormatError, match="20 frames, 40 requested"):
            verify_equivalence(line_spec, line_weights, make_frames(line_spec, 20), 40)
