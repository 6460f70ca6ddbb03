"""Operation meters, memory audits and closed-form cost expectations.

Two currencies are kept apart:
    node cells   one conv+pool evaluation at one spatial position, channels not
                 multiplied (level 0 counts ingested frame cells);
    scalar mults every multiply-add actually performed.
"""

import csv
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, TextIO, Tuple

from schemas.output_schema import (
    FormulaRow,
    FormulaTable,
    LevelAudit,
    LevelMemoryRow,
    MemoryAudit,
)
from shift_memory_segmentation.pyramid_mode import PyramidMode
from shift_memory_segmentation.pyramid_model import PyramidSpec, lag, receptive_field

METER_CSV_HEADER = ("frame", "level", "cells", "mults")


@dataclass(frozen=True)
class MeterSnapshot:
    """
    Counters of one frame, per level 0 .. L.

    Attributes:
        frame_index (int): frame the counts belong to.
        cells (Tuple[int, ...]): node cells (for the shift engine: window-pyramid nodes).
        halo_cells (Tuple[int, ...]): nodes older than the window pyramid (shift only).
        mults (Tuple[int, ...]): scalar multiply-adds, decoder included.
    """

    frame_index: int
    cells: Tuple[int, ...]
    halo_cells: Tuple[int, ...]
    mults: Tuple[int, ...]

    @property
    def total_cells(self) -> int:
        return sum(self.cells)

    @property
    def total_halo_cells(self) -> int:
        return sum(self.halo_cells)

    @property
    def total_mults(self) -> int:
        return sum(self.mults)

    def csv_rows(self) -> List[Tuple[int, int, int, int]]:
        """`frame,level,cells,mults` rows, one per level."""
        return [
            (self.frame_index, level, cells, mults)
            for level, (cells, mults) in enumerate(zip(self.cells, self.mults))
        ]


class OpMeter:
    """
    Per-frame and cumulative operation counters of one engine.

    Args:
        levels (int): pyramid levels L; counters cover levels 0 .. L.
    """

    def __init__(self, levels: int):
        self.levels = levels
        self.reset()

    def reset(self):
        """Zero every counter."""
        width = self.levels + 1
        self.cells = [0] * width
        self.halo_cells = [0] * width
        self.mults = [0] * width
        self.total_cells = [0] * width
        self.total_halo_cells = [0] * width
        self.total_mults = [0] * width
        self.frames_seen = 0

    def start_frame(self):
        """Clear the per-frame counters; totals keep growing."""
        width = self.levels + 1
        self.cells = [0] * width
        self.halo_cells = [0] * width
        self.mults = [0] * width

    def record(self, level: int, cells: int = 0, mults: int = 0, halo_cells: int = 0):
        """Add work done at `level` during the current frame."""
        self.cells[level] += cells
        self.halo_cells[level] += halo_cells
        self.mults[level] += mults
        self.total_cells[level] += cells
        self.total_halo_cells[level] += halo_cells
        self.total_mults[level] += mults

    def record_levels(self, mults: Iterable[int]):
        """Add per-level multiply-adds (a decode) to the current frame."""
        for level, count in enumerate(mults):
            self.record(level, mults=count)

    def end_frame(self, frame_index: int) -> MeterSnapshot:
        """Close the frame and return its counters."""
        self.frames_seen += 1
        return MeterSnapshot(
            frame_index, tuple(self.cells), tuple(self.halo_cells), tuple(self.mults)
        )


def _per_level(spec: PyramidSpec, weight) -> int:
    return sum(weight(level) * spec.level_cells(level) for level in range(spec.levels + 1))


def expected_front_cells(spec: PyramidSpec) -> int:
    """Node cells per frame of the shift-memory front: sum of cells(l), l = 0 .. L."""
    return _per_level(spec, lambda level: 1)


def expected_recompute_cells(spec: PyramidSpec) -> int:
    """Window-pyramid node cells per frame of naive shift mode: sum of (T / 2**l) * cells(l)."""
    return _per_level(spec, lambda level: 2 ** (spec.levels - level))


def expected_halo_cells(spec: PyramidSpec) -> int:
    """Nodes older than the window pyramid that the causal recurrence also needs."""
    return _per_level(spec, lambda level: 2 ** (spec.levels - level) - 1)


def expected_patch_cells(spec: PyramidSpec) -> float:
    """Window-pyramid cells amortised over the T frames between patch outputs."""
    return expected_recompute_cells(spec) / spec.frames


def expected_oracle_cells(spec: PyramidSpec) -> int:
    """
    Node cells of one uncached patch output.

    The front column evaluates oracle nodes for every level m; a level-m node
    evaluates 4**(m-l) level-l nodes, so level l totals (4**(L-l+1) - 1) / 3.
    """
    return _per_level(spec, lambda level: (4 ** (spec.levels - level + 1) - 1) // 3)


class MemoryExpectation(NamedTuple):
    """Implemented buffer size next to the published figure."""

    node_cells: int
    scalar_cells: int
    published_node_cells: float


def _ring_cells(spec: PyramidSpec, level: int) -> Tuple[int, int]:
    """Node and scalar cells of the two rings of `level`."""
    slots = lag(level) + 1
    cells = spec.level_cells(level - 1)
    channels = spec.level_channels(level - 1) + spec.level_channels(level)
    return 2 * slots * cells, slots * cells * channels


def expected_smn_memory_cells(spec: PyramidSpec) -> MemoryExpectation:
    """
    Cells held by the shift-memory rings after warm-up.

    Level l keeps s_l + 1 copies of f_{l-1} and of c_l, both at level-(l-1) size.
    """
    rings = [_ring_cells(spec, level) for level in range(1, spec.levels + 1)]
    return MemoryExpectation(
        node_cells=sum(node for node, _ in rings),
        scalar_cells=sum(scalar for _, scalar in rings),
        published_node_cells=published_figures(spec)["smn_memory"],
    )


def shift_node_counts(spec: PyramidSpec, level: int) -> Tuple[int, int]:
    """
    (f nodes, c nodes) at `level` evaluated per frame by naive shift mode.

    f_l is needed at 2**(L-l+1) - 1 times spaced 2**l apart; each needs c_l at
    its own time and s_l earlier.
    """
    f_nodes = 2 ** (spec.levels - level + 1) - 1
    return f_nodes, (2 * f_nodes if level else 0)


def expected_shift_memory_cells(spec: PyramidSpec) -> MemoryExpectation:
    """Raw frame window plus the per-frame scratch of every memoised node."""
    window = receptive_field(spec.levels)
    node = window * spec.level_cells(0)
    scalar = node * spec.in_channels
    for level in range(1, spec.levels + 1):
        f_nodes, c_nodes = shift_node_counts(spec, level)
        channels = spec.level_channels(level)
        node += f_nodes * spec.level_cells(level) + c_nodes * spec.level_cells(level - 1)
        scalar += channels * (
            f_nodes * spec.level_cells(level) + c_nodes * spec.level_cells(level - 1)
        )
    return MemoryExpectation(node, scalar, published_figures(spec)["shift_memory"])


def expected_patch_memory_cells(spec: PyramidSpec) -> int:
    """Dense pyramid patch, T frames of level-0 cells."""
    return spec.frames * spec.level_cells(0)


def published_figures(spec: PyramidSpec) -> dict:
    """
    The published closed forms, evaluated for `spec`.

    They assume W = T (and H = T); other sizes scale them by W/T (W*H/T**2).
    """
    levels = spec.levels
    t = spec.frames
    if spec.mode is PyramidMode.LINE:
        scale = spec.width / t
        return {
            "smn_cells": (2 * t - 1) * scale,
            "shift_cells": 4 * (4**levels - 1) / 3 * scale,
            "patch_cells": t * t / t * scale,
            "smn_memory": t * levels * scale,
            "shift_memory": 4 * t * t / 3 * scale,
            "patch_memory": t * t * scale,
            "compute_ratio": 2 * t / 3,
        }
    scale = spec.width * spec.height / (t * t)
    return {
        "smn_cells": 4 * (t * t - 1) / 3 * scale,
        "shift_cells": 8 * (2 ** (3 * levels) - 1) / 7 * scale,
        "patch_cells": t**3 / t * scale,
        "smn_memory": t * (2**levels - 1) * scale,
        "shift_memory": t**3 * scale,
        "patch_memory": t**3 * scale,
        "compute_ratio": 3 * t / 4,
    }


_FORMULA_TEXT = {
    PyramidMode.LINE: {
        "smn_cells": "2T - 1",
        "shift_cells": "4(4^L - 1)/3",
        "patch_cells": "T^2/T",
        "smn_memory": "T log T",
        "shift_memory": "4T^2/3",
        "patch_memory": "T^2",
        "compute_ratio": "2T/3",
    },
    PyramidMode.VIDEO: {
        "smn_cells": "4(T^2 - 1)/3",
        "shift_cells": "8(2^3L - 1)/7",
        "patch_cells": "T^3/T",
        "smn_memory": "T(2^L - 1)",
        "shift_memory": "T^3",
        "patch_memory": "T^3",
        "compute_ratio": "3T/4",
    },
}


def level_memory_rows(spec: PyramidSpec) -> List[LevelMemoryRow]:
    """Per-level ring sizing next to the published 2**(l+1) nodes."""
    rows = []
    for level in range(1, spec.levels + 1):
        node, scalar = _ring_cells(spec, level)
        rows.append(
            LevelMemoryRow(
                level=level,
                lag=lag(level),
                implemented_slots=2 * (lag(level) + 1),
                published_slots=2 ** (level + 1),
                node_cells=node,
                scalar_cells=scalar,
            )
        )
    return rows


def formula_table(spec: PyramidSpec) -> FormulaTable:
    """
    Implemented exact counts against the published closed forms.

    Returns:
        FormulaTable: one row per quantity plus the per-level ring sizing.
    """
    published = published_figures(spec)
    text = _FORMULA_TEXT[spec.mode]
    front = expected_front_cells(spec)
    recompute = expected_recompute_cells(spec)
    implemented = {
        "smn_cells": front,
        "shift_cells": recompute,
        "patch_cells": expected_patch_cells(spec),
        "smn_memory": expected_smn_memory_cells(spec).node_cells,
        "shift_memory": expected_shift_memory_cells(spec).node_cells,
        "patch_memory": expected_patch_memory_cells(spec),
        "compute_ratio": recompute / front,
    }
    labels = {
        "smn_cells": "SMN cells/frame",
        "shift_cells": "Shift cells/frame",
        "patch_cells": "Patch cells/frame",
        "smn_memory": "SMN memory node cells",
        "shift_memory": "Shift memory node cells",
        "patch_memory": "Patch memory node cells",
        "compute_ratio": "Shift/SMN compute ratio",
    }
    rows = [
        FormulaRow(
            quantity=labels[key],
            implemented=float(implemented[key]),
            published_formula=text[key],
            published_value=float(published[key]),
            relative_gap=(
                abs(implemented[key] - published[key]) / published[key] if published[key] else 0.0
            ),
        )
        for key in labels
    ]
    return FormulaTable(spec=spec.describe(), rows=rows, levels=level_memory_rows(spec))


def audit(engine) -> MemoryAudit:
    """
    Count the cells an engine currently holds by walking its live buffers.

    Args:
        engine: any engine exposing `held_maps()` -> iterable of (level, FeatureMap).

    Returns:
        MemoryAudit: per-level and total node and scalar cells.
    """
    levels = engine.spec.levels
    node = [0] * (levels + 1)
    scalar = [0] * (levels + 1)
    for level, held in engine.held_maps():
        node[level] += held.cells
        scalar[level] += held.scalars
    return MemoryAudit(
        engine=engine.kind.value,
        levels=[
            LevelAudit(level=level, node_cells=node[level], scalar_cells=scalar[level])
            for level in range(levels + 1)
        ],
        total_node_cells=sum(node),
        total_scalar_cells=sum(scalar),
    )


def write_meter_csv(snapshots: Iterable[MeterSnapshot], sink: TextIO) -> int:
    """
    Write `frame,level,cells,mults` rows.

    Returns:
        int: number of data rows written.
    """
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(METER_CSV_HEADER)
    rows = 0
    for snapshot in snapshots:
        for row in snapshot.csv_rows():
            writer.writerow(row)
            rows += 1
    return rows
