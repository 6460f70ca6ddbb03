""" Processor class """

import sys
import time
from itertools import islice
from typing import BinaryIO, Iterator, List, Optional, Tuple

import numpy as np
import psutil
from byoa.telemetry.log_manager.log_manager import LogManager

from schemas.output_schema import BenchReport, BenchRow, Metrics, RunResult
from shift_memory_segmentation.engines import create_engine
from shift_memory_segmentation.exceptions import FormatError
from shift_memory_segmentation.metering import (
    MeterSnapshot,
    audit,
    expected_front_cells,
    expected_oracle_cells,
    expected_recompute_cells,
    write_meter_csv,
)
from shift_memory_segmentation.pyramid_mode import EngineKind
from shift_memory_segmentation.pyramid_model import PyramidSpec, Weights
from shift_memory_segmentation.stream_io import (
    LabelHeader,
    StreamHeader,
    read_stream,
    write_labels,
)
from shift_memory_segmentation.tensor_core import FeatureMap, LabelMap
from shift_memory_segmentation.utils import file_sha256
from shift_memory_segmentation.weights_io import load_weights_file

logger = LogManager.get_instance()

STDIN_PATH = "-"


def rss_mb() -> float:
    """Resident set size of this process in MB."""
    return round(psutil.Process().memory_info().rss / 1024.0 / 1024.0, 3)


def check_stream_fits(header: StreamHeader, spec: PyramidSpec):
    """
    Raises:
        FormatError: the stream mode, dims or channels differ from the weight spec.
    """
    stream = (header.mode, header.width, header.height, header.channels)
    expected = (spec.mode, spec.width, spec.height, spec.in_channels)
    if stream != expected:
        raise FormatError(
            f"Stream (mode, W, H, channels) {stream} does not match the weights {expected}"
        )


def open_input(path: str) -> BinaryIO:
    """Binary handle on `path`; `-` is standard input."""
    if path == STDIN_PATH:
        return sys.stdin.buffer
    return open(path, "rb")


def close_input(source: BinaryIO):
    if source is not sys.stdin.buffer:
        source.close()


def load_frames(path: str, spec: PyramidSpec, limit: Optional[int] = None) -> List[FeatureMap]:
    """Decode up to `limit` frames of a stream that fits `spec`."""
    source = open_input(path)
    try:
        header, frames = read_stream(source)
        check_stream_fits(header, spec)
        return list(islice(frames, limit))
    finally:
        close_input(source)


class StreamSegmentationProcessor:
    """Streams one SMNS file through one engine and writes the labels

    Parameters:
        weights_path: SMNW weight file
        input_path: SMNS stream file, pipe, or `-` for standard input
        output_path: SMNL label file to write
        engine_kind: 'patch', 'shift' or 'smn'
        meter_path: optional CSV receiving `frame,level,cells,mults` rows
        metrics: bool to provide execution time and memory in the result
    """

    def __init__(
        self,
        weights_path: str,
        input_path: str,
        output_path: str,
        engine_kind: EngineKind = EngineKind.SMN,
        meter_path: Optional[str] = None,
        metrics: bool = False,
    ):
        self.weights_path = weights_path
        self.input_path = input_path
        self.output_path = output_path
        self.engine_kind = EngineKind(engine_kind)
        self.meter_path = meter_path
        self.metrics = metrics
        self.spec: Optional[PyramidSpec] = None
        self.weights: Optional[Weights] = None
        self._source: Optional[BinaryIO] = None
        self._frames: Optional[Iterator[FeatureMap]] = None

    def prepare_data(self):
        """Load the weights, open the input once and check its header against them."""
        self.spec, self.weights = load_weights_file(self.weights_path)
        self._source = open_input(self.input_path)
        try:
            header, self._frames = read_stream(self._source)
            check_stream_fits(header, self.spec)
        except FormatError as exc:
            logger.error(f"Input {self.input_path} rejected: {exc}")
            self.close()
            raise
        logger.info("data_prepared")

    def close(self):
        """Release the input handle; standard input stays open."""
        if self._source is not None:
            close_input(self._source)
        self._source = None
        self._frames = None

    def predict(self) -> Tuple[int, List[Tuple[int, LabelMap]], List[MeterSnapshot]]:
        """
        Stream every frame of the prepared input through the engine.

        Returns:
            (int, list, list): frames streamed, (frame index, labels) of READY
            frames, and one meter snapshot per frame.
        """
        if self._frames is None:
            raise RuntimeError("prepare_data must run before predict")
        engine = create_engine(self.engine_kind, self.spec, self.weights)
        labelled = []
        snapshots = []
        for output in engine.run(self._frames):
            snapshots.append(output.meter)
            if output.ready:
                labelled.append((output.frame_index, output.labels))
        return engine.frame_index, labelled, snapshots

    def trigger(self) -> RunResult:
        """trigger the processor
        Returns:
            RunResult
        """
        logger.info("Processor triggered")
        start_time = time.time()

        self.prepare_data()
        try:
            frames, labelled, snapshots = self.predict()
        finally:
            self.close()

        spec = self.spec
        with open(self.output_path, "wb") as file:
            write_labels(LabelHeader(spec.mode, spec.width, spec.height), labelled, file)
        logger.info(f"{len(labelled)} labelled frames written to {self.output_path}")
        if self.meter_path:
            with open(self.meter_path, "w", encoding="utf-8", newline="") as file:
                rows = write_meter_csv(snapshots, file)
            logger.info(f"{rows} meter rows written to {self.meter_path}")

        result = RunResult(
            engine=self.engine_kind.value,
            frames=frames,
            ready_frames=len(labelled),
            labels_path=self.output_path,
            labels_sha256=file_sha256(self.output_path),
            meter_path=self.meter_path,
        )
        if self.metrics:
            elapsed = time.time() - start_time
            result.metrics = Metrics(
                execution_time=f"{int(elapsed // 60)} minutes {elapsed % 60:.3f} seconds",
                rss_mb=rss_mb(),
            )
        return result


def _expected_cells(kind: EngineKind, spec: PyramidSpec) -> float:
    if kind is EngineKind.SMN:
        return float(expected_front_cells(spec))
    if kind is EngineKind.SHIFT:
        return float(expected_recompute_cells(spec))
    return expected_oracle_cells(spec) / spec.frames


def bench(
    spec: PyramidSpec,
    weights: Weights,
    frames: List[FeatureMap],
    repeat: int = 3,
    kinds: Tuple[EngineKind, ...] = (EngineKind.PATCH, EngineKind.SHIFT, EngineKind.SMN),
) -> BenchReport:
    """
    Time every engine over the same decoded frames.

    Measured cells per frame are taken over the output frames: the steady
    per-frame count for shift and smn, and each patch output spread over the
    T frames it covers. Repeats run sequentially.

    Returns:
        BenchReport: one row per engine.
    """
    rows = []
    for kind in kinds:
        timings = []
        cells: List[float] = []
        engine = None
        for index in range(repeat):
            engine = create_engine(kind, spec, weights)
            cells = []
            start = time.perf_counter_ns()
            for frame in frames:
                output = engine.step(frame)
                if output.ready:
                    cells.append(output.meter.total_cells)
            timings.append((time.perf_counter_ns() - start) / max(len(frames), 1))
            logger.info(f"Bench {kind.value} repeat {index + 1}/{repeat} done")
        measured = float(np.mean(cells)) if cells else 0.0
        if kind is EngineKind.PATCH:
            measured /= spec.frames
        rows.append(
            BenchRow(
                engine=kind.value,
                cells_per_frame=measured,
                expected_cells_per_frame=_expected_cells(kind, spec),
                memory_node_cells=audit(engine).total_node_cells if engine else 0,
                ns_per_frame=float(np.median(timings)) if timings else 0.0,
                rss_mb=rss_mb(),
            )
        )
    return BenchReport(spec=spec.describe(), frames=len(frames), repeat=repeat, rows=rows)
