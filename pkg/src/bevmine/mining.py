"""Pseudo-label mining from the two teachers.

Main foreground mining (MFM) promotes confident static-teacher anchors,
supplement foreground mining (SFM) adds dynamic-teacher anchors that MFM
missed (deduplicated at grid-cell granularity), neighbor anchor sampling
(NAS) densifies each mined box onto heavily overlapping anchor templates,
and merge_labels folds everything together under sparse labels.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .detector import Prediction, direction_bin
from .geometry import (
    AnchorGrid,
    BoxBEV,
    RegDelta,
    anchor_index_to_grid,
    decode_box,
    encode_box,
    fold_yaw,
    iou_upper_bound,
    nms,
    rotated_iou,
)

log = logging.getLogger(__name__)


class LabelSource(str, enum.Enum):
    SPARSE = "sparse"
    PSEUDO_MAIN = "pseudo_main"
    PSEUDO_SUPP = "pseudo_supp"
    NEIGHBOR = "neighbor"


# Lower number wins anchor collisions in merge_labels.
_PRIORITY = {
    LabelSource.SPARSE: 0,
    LabelSource.PSEUDO_MAIN: 1,
    LabelSource.PSEUDO_SUPP: 2,
    LabelSource.NEIGHBOR: 3,
}


@dataclass(frozen=True)
class PositiveEntry:
    anchor_index: int
    score: float
    box: BoxBEV
    source: LabelSource

    def __post_init__(self):
        if not 0.0 < self.score <= 1.0:
            raise ValueError(f"score {self.score} outside (0, 1]")


@dataclass(frozen=True)
class PositiveSet:
    entries: tuple[PositiveEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        indices = [e.anchor_index for e in self.entries]
        if len(indices) != len(set(indices)):
            raise ValueError("duplicate anchor indices in positive set")

    def anchor_indices(self) -> set[int]:
        return {e.anchor_index for e in self.entries}

    def cells(self, anchors_per_cell: int) -> set[int]:
        return {anchor_index_to_grid(e.anchor_index, anchors_per_cell) for e in self.entries}

    def union(self, other: "PositiveSet") -> "PositiveSet":
        return PositiveSet(entries=self.entries + other.entries)


EMPTY_POSITIVES = PositiveSet(entries=())


@dataclass(frozen=True)
class LabelEntry:
    anchor_index: int
    target: RegDelta
    direction_bin: int
    source: LabelSource
    score: float | None = None
    supervise_regression: bool = True

    def __post_init__(self):
        if self.direction_bin not in (0, 1):
            raise ValueError(f"direction bin must be 0 or 1, got {self.direction_bin}")


@dataclass(frozen=True)
class LabelSet:
    positives: tuple[LabelEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "positives", tuple(self.positives))
        indices = [e.anchor_index for e in self.positives]
        if len(indices) != len(set(indices)):
            raise ValueError("duplicate anchor indices in label set")

    def count_by_source(self) -> dict[str, int]:
        counts = {s.value: 0 for s in LabelSource}
        for e in self.positives:
            counts[e.source.value] += 1
        return counts


EMPTY_LABELS = LabelSet(positives=())


@dataclass(frozen=True)
class MiningConfig:
    sigma_st_low: float = 0.15
    sigma_st_high: float = 0.2
    tau: float = 0.15
    tau_nei: float = 0.6

    def __post_init__(self):
        if not 0.0 < self.sigma_st_low < self.sigma_st_high < 1.0:
            raise ValueError("need 0 < sigma_st_low < sigma_st_high < 1")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if not 0.0 < self.tau_nei < 1.0:
            raise ValueError("tau_nei must lie in (0, 1)")


# ---------------------------------------------------------------------------
# Foreground mining.


def threshold_candidates(pred: Prediction, sigma: float) -> np.ndarray:
    """Anchor indices whose sigmoid score strictly exceeds sigma, ascending."""
    return np.nonzero(pred.flat_scores() > sigma)[0]


def _filter_and_nms(pred: Prediction, grid: AnchorGrid, sigma: float, tau: float, source: LabelSource) -> PositiveSet:
    scores = pred.flat_scores()
    idx = threshold_candidates(pred, sigma)
    boxes = [decode_box(grid.anchor_box(int(i)), pred.delta_at(int(i))) for i in idx]
    kept = nms([(box, float(scores[i])) for box, i in zip(boxes, idx)], tau)
    return PositiveSet(
        entries=tuple(
            PositiveEntry(
                anchor_index=int(idx[k]),
                score=float(scores[idx[k]]),
                box=boxes[k],
                source=source,
            )
            for k in kept
        )
    )


def mfm(pred: Prediction, grid: AnchorGrid, sigma_st: float, tau: float) -> PositiveSet:
    """Keep static-teacher anchors scoring above sigma_st, decode, suppress
    overlaps above tau."""
    if not 0.0 < sigma_st < 1.0:
        raise ValueError("sigma_st must lie in (0, 1)")
    return _filter_and_nms(pred, grid, sigma_st, tau, LabelSource.PSEUDO_MAIN)


def sfm(pred_dt: Prediction, grid: AnchorGrid, sigma_dt: float, tau: float, r_st: PositiveSet) -> PositiveSet:
    """Mine the dynamic teacher at sigma_dt, then drop every candidate whose
    grid cell already holds a main-mined anchor."""
    if not 0.0 < sigma_dt < 1.0:
        raise ValueError("sigma_dt must lie in (0, 1)")
    candidates = _filter_and_nms(pred_dt, grid, sigma_dt, tau, LabelSource.PSEUDO_SUPP)
    taken = r_st.cells(grid.anchors_per_cell)
    return PositiveSet(
        entries=tuple(
            e
            for e in candidates.entries
            if anchor_index_to_grid(e.anchor_index, grid.anchors_per_cell) not in taken
        )
    )


# ---------------------------------------------------------------------------
# Dynamic threshold adaptation.


def two_means_high_center(scores: Sequence[float]) -> float:
    """Exact 1-D 2-means by scanning every contiguous split of the sorted
    scores for minimum within-cluster SSE; returns the higher centroid. The
    first minimal split wins ties."""
    xs = sorted(float(s) for s in scores)
    n = len(xs)
    if n == 0:
        raise ValueError("no scores to cluster")
    if n == 1:
        return xs[0]
    best_sse = math.inf
    best_split = 1
    for k in range(1, n):
        mean_lo = sum(xs[:k]) / k
        mean_hi = sum(xs[k:]) / (n - k)
        sse = sum((x - mean_lo) ** 2 for x in xs[:k]) + sum((x - mean_hi) ** 2 for x in xs[k:])
        if sse < best_sse:
            best_sse = sse
            best_split = k
    return sum(xs[best_split:]) / (n - best_split)


def dynamic_threshold(
    preds: Sequence[Prediction],
    sparse_anchor_indices: Sequence[Sequence[int]],
    fallback: float,
) -> float:
    """Cluster the dynamic teacher's sigmoid scores at the batch's sparse
    anchors into two groups; the high-cluster centroid becomes sigma_dt.
    With fewer than two scores, falls back to the lone score or to
    ``fallback`` (logged)."""
    if len(preds) != len(sparse_anchor_indices):
        raise ValueError("one anchor list per prediction required")
    scores: list[float] = []
    for pred, anchors in zip(preds, sparse_anchor_indices):
        flat = pred.flat_scores()
        scores.extend(float(flat[a]) for a in anchors)
    if len(scores) >= 2:
        return two_means_high_center(scores)
    if len(scores) == 1:
        log.warning("dynamic threshold fallback: single sparse score %.4f", scores[0])
        return scores[0]
    log.warning("dynamic threshold fallback: no sparse scores, using %.4f", fallback)
    return fallback


# ---------------------------------------------------------------------------
# Neighbor anchor sampling.


@dataclass(frozen=True)
class Neighbor:
    anchor_index: int
    parent: int  # position in the positives' entry tuple


def nas(positives: PositiveSet, grid: AnchorGrid, tau_nei: float) -> list[Neighbor]:
    """Promote anchors whose template footprint overlaps a mined box above
    tau_nei, excluding anchors already mined; each neighbor records the
    positive it overlaps most (first such positive on exact ties)."""
    if not positives.entries:
        return []
    existing = positives.anchor_indices()
    a_per_cell = grid.anchors_per_cell
    h, w = grid.height_cells, grid.width_cells
    ox, oy = grid.origin
    max_template_diag = max(math.hypot(l, wd) for l, wd, _ in grid.templates)

    best_iou: dict[int, float] = {}
    best_parent: dict[int, int] = {}
    for p_idx, entry in enumerate(positives.entries):
        # Anchors farther than the half-diagonal sum cannot overlap at all.
        reach = (entry.box.diagonal + max_template_diag) / 2.0
        col_lo = max(0, int(math.floor((entry.box.cx - reach - ox) / grid.cell_size)))
        col_hi = min(w - 1, int(math.floor((entry.box.cx + reach - ox) / grid.cell_size)))
        row_lo = max(0, int(math.floor((entry.box.cy - reach - oy) / grid.cell_size)))
        row_hi = min(h - 1, int(math.floor((entry.box.cy + reach - oy) / grid.cell_size)))
        for row in range(row_lo, row_hi + 1):
            for col in range(col_lo, col_hi + 1):
                for a in range(a_per_cell):
                    flat = (row * w + col) * a_per_cell + a
                    if flat in existing:
                        continue
                    anchor = grid.anchor_box(flat)
                    current = best_iou.get(flat, 0.0)
                    # Pairs bounded below both the threshold and the running
                    # best can change neither selection nor parent.
                    if iou_upper_bound(anchor, entry.box) <= max(tau_nei, current):
                        continue
                    iou = rotated_iou(anchor, entry.box)
                    if iou > current:
                        best_iou[flat] = iou
                        best_parent[flat] = p_idx
    return [
        Neighbor(anchor_index=flat, parent=best_parent[flat])
        for flat in sorted(best_iou)
        if best_iou[flat] > tau_nei
    ]


# ---------------------------------------------------------------------------
# Label merging and sparse-anchor assignment.


def regression_target(anchor: BoxBEV, box: BoxBEV) -> RegDelta:
    """Encoded target with the box yaw folded onto the anchor's half circle;
    the unfolded heading is supervised through the direction bin instead."""
    return encode_box(anchor, replace(box, yaw=fold_yaw(box.yaw, anchor.yaw)))


def merge_labels(
    sparse: Sequence[tuple[int, BoxBEV]],
    positives: PositiveSet,
    neighbors: Sequence[Neighbor],
    grid: AnchorGrid,
    pseudo_regression: bool = True,
) -> LabelSet:
    """Union of sparse, mined, and neighbor labels. On anchor collisions the
    priority is Sparse > PseudoMain > PseudoSupp > Neighbor; sparse entries
    are never displaced."""
    chosen: dict[int, LabelEntry] = {}

    def offer(entry: LabelEntry):
        held = chosen.get(entry.anchor_index)
        if held is None or _PRIORITY[entry.source] < _PRIORITY[held.source]:
            chosen[entry.anchor_index] = entry

    for anchor_index, gt_box in sparse:
        anchor = grid.anchor_box(anchor_index)
        offer(
            LabelEntry(
                anchor_index=anchor_index,
                target=regression_target(anchor, gt_box),
                direction_bin=direction_bin(gt_box.yaw),
                source=LabelSource.SPARSE,
            )
        )
    for source in (LabelSource.PSEUDO_MAIN, LabelSource.PSEUDO_SUPP):
        for e in positives.entries:
            if e.source is not source:
                continue
            anchor = grid.anchor_box(e.anchor_index)
            offer(
                LabelEntry(
                    anchor_index=e.anchor_index,
                    target=regression_target(anchor, e.box),
                    direction_bin=direction_bin(e.box.yaw),
                    source=e.source,
                    score=e.score,
                    supervise_regression=pseudo_regression,
                )
            )
    for n in neighbors:
        parent = positives.entries[n.parent]
        anchor = grid.anchor_box(n.anchor_index)
        offer(
            LabelEntry(
                anchor_index=n.anchor_index,
                target=regression_target(anchor, parent.box),
                direction_bin=direction_bin(parent.box.yaw),
                source=LabelSource.NEIGHBOR,
                score=parent.score,
                supervise_regression=pseudo_regression,
            )
        )
    return LabelSet(positives=tuple(chosen[i] for i in sorted(chosen)))


def assign_sparse_anchor(gt_box: BoxBEV, grid: AnchorGrid) -> int:
    """The anchor whose template footprint overlaps the box most; exact ties
    go to the lower flat index."""
    if not grid.contains_point(gt_box.cx, gt_box.cy):
        raise ValueError(
            f"box center ({gt_box.cx:.2f}, {gt_box.cy:.2f}) lies outside the grid"
        )
    a_per_cell = grid.anchors_per_cell
    h, w = grid.height_cells, grid.width_cells
    ox, oy = grid.origin
    max_template_diag = max(math.hypot(l, wd) for l, wd, _ in grid.templates)
    reach = (gt_box.diagonal + max_template_diag) / 2.0
    col_lo = max(0, int(math.floor((gt_box.cx - reach - ox) / grid.cell_size)))
    col_hi = min(w - 1, int(math.floor((gt_box.cx + reach - ox) / grid.cell_size)))
    row_lo = max(0, int(math.floor((gt_box.cy - reach - oy) / grid.cell_size)))
    row_hi = min(h - 1, int(math.floor((gt_box.cy + reach - oy) / grid.cell_size)))

    best_iou = 0.0
    best_flat = 0
    for row in range(row_lo, row_hi + 1):
        for col in range(col_lo, col_hi + 1):
            for a in range(a_per_cell):
                flat = (row * w + col) * a_per_cell + a
                anchor = grid.anchor_box(flat)
                if iou_upper_bound(anchor, gt_box) <= best_iou:
                    continue
                iou = rotated_iou(anchor, gt_box)
                if iou > best_iou:
                    best_iou = iou
                    best_flat = flat
    return best_flat


# ---------------------------------------------------------------------------
# Pseudo-label dump files (one JSON record per scene).


def labels_to_record(scene_id: str, labels: LabelSet, grid: AnchorGrid) -> dict:
    rows = []
    for e in labels.positives:
        box = decode_box(grid.anchor_box(e.anchor_index), e.target)
        rows.append(
            {
                "anchor": e.anchor_index,
                "source": e.source.value,
                "score": e.score,
                "box": {
                    "cx": box.cx,
                    "cy": box.cy,
                    "length": box.length,
                    "width": box.width,
                    "yaw": box.yaw,
                },
            }
        )
    return {"scene_id": scene_id, "labels": rows}


def save_label_dump(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")


def load_label_dump(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"label dump line {line_no}: not valid JSON ({exc.msg})") from exc
            for key in ("scene_id", "labels"):
                if key not in record:
                    raise ValueError(f"label dump line {line_no}: missing field '{key}'")
            records.append(record)
    return records
