"""Output schema classes"""

from typing import List, Optional

from pydantic import BaseModel


class LevelAudit(BaseModel):
    """
    Memory held for one pyramid level.

    Attributes:
        level (int): pyramid level.
        node_cells (int): channel-free cells held.
        scalar_cells (int): float32 values held (cells times channels).
    """

    level: int
    node_cells: int
    scalar_cells: int


class MemoryAudit(BaseModel):
    """
    Live buffer census of one engine.

    Attributes:
        engine (str): engine kind.
        levels (List[LevelAudit]): per-level counts, level 0 first.
        total_node_cells (int): sum of node cells.
        total_scalar_cells (int): sum of scalar cells.
    """

    engine: str
    levels: List[LevelAudit]
    total_node_cells: int
    total_scalar_cells: int


class Divergence(BaseModel):
    """
    First point where two evaluations disagree.

    Attributes:
        frame (int): zero-based frame index.
        level (Optional[int]): front level, None when only the labels differ.
        cell (int): flat channel-major index of the first differing value.
        detail (str): what was compared.
    """

    frame: int
    level: Optional[int] = None
    cell: int
    detail: str


class VerificationReport(BaseModel):
    """
    Result of running the shift and shift-memory engines in lockstep.

    Attributes:
        equivalent (bool): True when nothing diverged.
        frames_compared (int): frames streamed through both engines.
        ready_frames (int): frames whose labels and fronts were compared.
        period_checks (int): window nodes compared against earlier front nodes.
        first_divergence (Optional[Divergence]): first engine mismatch.
        period_divergence (Optional[Divergence]): first periodicity mismatch.
    """

    equivalent: bool
    frames_compared: int
    ready_frames: int
    period_checks: int = 0
    first_divergence: Optional[Divergence] = None
    period_divergence: Optional[Divergence] = None


class BenchRow(BaseModel):
    """
    One engine line of the benchmark table.

    Attributes:
        engine (str): engine kind.
        cells_per_frame (float): measured node cells per frame in steady state.
        expected_cells_per_frame (float): closed-form expectation.
        memory_node_cells (int): node cells held after the run.
        ns_per_frame (float): median over repeats of the mean step time.
        rss_mb (float): process resident set size after the run.
    """

    engine: str
    cells_per_frame: float
    expected_cells_per_frame: float
    memory_node_cells: int
    ns_per_frame: float
    rss_mb: float


class BenchReport(BaseModel):
    """
    Benchmark over one stream.

    Attributes:
        spec (str): pyramid summary.
        frames (int): frames per repeat.
        repeat (int): repeats per engine.
        rows (List[BenchRow]): one row per engine.
    """

    spec: str
    frames: int
    repeat: int
    rows: List[BenchRow]


class FormulaRow(BaseModel):
    """
    An implemented count next to the closed form it corresponds to.

    Attributes:
        quantity (str): what is counted.
        implemented (float): exact count of the implementation.
        published_formula (str): the closed form as usually written.
        published_value (float): that closed form evaluated for the pyramid.
        relative_gap (float): |implemented - published| / published.
    """

    quantity: str
    implemented: float
    published_formula: str
    published_value: float
    relative_gap: float


class LevelMemoryRow(BaseModel):
    """
    Ring sizing of one level.

    Attributes:
        level (int): pyramid level.
        lag (int): s_l = 2**(l-1).
        implemented_slots (int): f and c ring slots, 2 * (s_l + 1).
        published_slots (int): the 2**(l+1) nodes of the published sizing.
        node_cells (int): channel-free cells of both rings.
        scalar_cells (int): float32 values of both rings.
    """

    level: int
    lag: int
    implemented_slots: int
    published_slots: int
    node_cells: int
    scalar_cells: int


class FormulaTable(BaseModel):
    """
    Memory and computation accounting for one pyramid.

    Attributes:
        spec (str): pyramid summary.
        rows (List[FormulaRow]): per-quantity comparison.
        levels (List[LevelMemoryRow]): per-level ring sizing.
    """

    spec: str
    rows: List[FormulaRow]
    levels: List[LevelMemoryRow]


class Metrics(BaseModel):
    """
    Metrics for the output.

    Attributes:
        execution_time (Optional[str]): wall-clock duration of the run.
        rss_mb (Optional[float]): resident set size at the end of the run.
    """

    execution_time: Optional[str] = None
    rss_mb: Optional[float] = None


class RunResult(BaseModel):
    """
    Output of one `run`.

    Attributes:
        engine (str): engine kind.
        frames (int): frames streamed.
        ready_frames (int): frames written to the label file.
        labels_path (str): label file path.
        labels_sha256 (str): digest of the label file.
        meter_path (Optional[str]): meter CSV path when requested.
        metrics (Optional[Metrics]): run metrics.
    """

    engine: str
    frames: int
    ready_frames: int
    labels_path: str
    labels_sha256: str
    meter_path: Optional[str] = None
    metrics: Optional[Metrics] = None
