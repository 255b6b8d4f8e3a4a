"""Detection metrics (AP) and pseudo-label quality metrics (FPR/MPR/AN).

AP uses all-point interpolation over a global score ranking. Pseudo-label
quality follows the false-prediction / missing-prediction ratio definitions:
FPR = false pseudo labels / pseudo labels, MPR = missed ground truths /
ground truths, AN = pseudo labels per frame. Sparse entries are given, not
mined, so they never count as pseudo labels; neighbor entries are tallied
separately. Ground truths are restricted to boxes whose center falls inside
the ego grid, since nothing outside it is ever predicted or mined.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detector import DetectorState, prediction_from_features
from .geometry import GLOBAL_FRAME, AnchorGrid, BoxBEV, decode_box, nms, rotated_iou, transform_box
from .mining import LabelSource
from .scenes import Scene
from .trainer import scene_features

log = logging.getLogger(__name__)

PSEUDO_SOURCES = (LabelSource.PSEUDO_MAIN.value, LabelSource.PSEUDO_SUPP.value)


@dataclass(frozen=True)
class Detection:
    box: BoxBEV
    score: float


@dataclass(frozen=True)
class DetectionResult:
    scene_id: str
    detections: tuple[Detection, ...]

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))
        if any(not np.isfinite(d.score) for d in self.detections):
            raise ValueError(f"non-finite detection score in scene {self.scene_id}")


@dataclass(frozen=True)
class MetricsReport:
    ap: dict
    counts: dict
    fpr: float | None = None
    mpr: float | None = None
    an: float | None = None
    an_with_neighbors: float | None = None
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "ap": {f"{t:g}": v for t, v in sorted(self.ap.items())},
            "counts": self.counts,
            "fpr": self.fpr,
            "mpr": self.mpr,
            "an": self.an,
            "an_with_neighbors": self.an_with_neighbors,
            "flags": list(self.flags),
            "ap_interpolation": "all-point, global score ranking",
        }


def scene_gt_in_grid(scene: Scene, grid: AnchorGrid) -> list[BoxBEV]:
    """Ground-truth boxes in the ego frame whose center lies inside the grid."""
    ego = scene.agents[0]
    out = []
    for box, _ in scene.gt_boxes:
        local = transform_box(box, GLOBAL_FRAME, ego.pose)
        if grid.contains_point(local.cx, local.cy):
            out.append(local)
    return out


def run_inference(state: DetectorState, corpus: Sequence[Scene], grid: AnchorGrid,
                  score_threshold: float = 0.2, nms_tau: float = 0.15) -> list[DetectionResult]:
    results = []
    for scene in corpus:
        pred = prediction_from_features(scene_features(scene, grid), state, grid)
        scores = pred.flat_scores()
        idx = np.nonzero(scores > score_threshold)[0]
        boxes = [decode_box(grid.anchor_box(int(i)), pred.delta_at(int(i))) for i in idx]
        kept = nms([(box, float(scores[i])) for box, i in zip(boxes, idx)], nms_tau)
        results.append(
            DetectionResult(
                scene_id=scene.scene_id,
                detections=tuple(Detection(boxes[k], float(scores[idx[k]])) for k in kept),
            )
        )
    return results


def match_predictions(preds: Sequence[tuple[BoxBEV, float]], gts: Sequence[BoxBEV],
                      iou_threshold: float):
    """Greedy matching in descending score order: each prediction takes the
    unmatched ground truth it overlaps most, provided that IoU reaches the
    threshold. Returns per-prediction TP flags and per-gt matched flags."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    tp = [False] * len(preds)
    matched = [False] * len(gts)
    for i in order:
        box = preds[i][0]
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            iou = rotated_iou(box, gt)
            if iou > best_iou:
                best_iou = iou
                best_j = j
        if best_j >= 0 and best_iou >= iou_threshold:
            tp[i] = True
            matched[best_j] = True
    return tp, matched


def average_precision(results: Sequence[DetectionResult],
                      gts_per_scene: Sequence[Sequence[BoxBEV]],
                      iou_threshold: float) -> float:
    """Area under the all-point interpolated precision-recall curve over the
    globally score-ranked predictions of the whole corpus."""
    if len(results) != len(gts_per_scene):
        raise ValueError("one gt list per detection result required")
    rows = []
    total_gt = 0
    for res, gts in zip(results, gts_per_scene):
        total_gt += len(gts)
        preds = [(d.box, d.score) for d in res.detections]
        tp_flags, _ = match_predictions(preds, gts, iou_threshold)
        rows.extend((score, flag) for (_, score), flag in zip(preds, tp_flags))
    if total_gt == 0:
        log.warning("average precision over zero ground truths, defined as 0")
        return 0.0
    if not rows:
        return 0.0
    rows.sort(key=lambda r: -r[0])
    flags = np.array([1.0 if f else 0.0 for _, f in rows])
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / total_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_recall) * p
        prev_recall = r
    return float(ap)


def evaluate_detector(state: DetectorState, corpus: Sequence[Scene], grid: AnchorGrid,
                      iou_thresholds: Sequence[float] = (0.3, 0.5, 0.7),
                      score_threshold: float = 0.2, nms_tau: float = 0.15) -> MetricsReport:
    if not corpus:
        raise ValueError("cannot evaluate on an empty corpus")
    results = run_inference(state, corpus, grid, score_threshold, nms_tau)
    gts = [scene_gt_in_grid(scene, grid) for scene in corpus]
    ap = {float(t): average_precision(results, gts, float(t)) for t in iou_thresholds}
    total_gt = sum(len(g) for g in gts)
    tp_total = 0
    fp_total = 0
    missed = 0
    for res, scene_gts in zip(results, gts):
        preds = [(d.box, d.score) for d in res.detections]
        tp_flags, matched = match_predictions(preds, scene_gts, 0.5)
        tp_total += sum(tp_flags)
        fp_total += len(tp_flags) - sum(tp_flags)
        missed += len(matched) - sum(matched)
    flags = ("zero_gt",) if total_gt == 0 else ()
    return MetricsReport(
        ap=ap,
        counts={"tp": tp_total, "fp": fp_total, "missed": missed, "gt": total_gt,
                "predictions": tp_total + fp_total, "frames": len(corpus)},
        flags=flags,
    )


def _record_boxes(record: dict, sources) -> list[tuple[BoxBEV, float]]:
    out = []
    for row in record["labels"]:
        if row["source"] not in sources:
            continue
        b = row["box"]
        score = row["score"] if row["score"] is not None else 0.0
        out.append((BoxBEV(b["cx"], b["cy"], b["length"], b["width"], b["yaw"]), float(score)))
    return out


def pseudo_label_quality(records: Sequence[dict], scenes_by_id: dict, grid: AnchorGrid,
                         iou_threshold: float = 0.5) -> MetricsReport:
    """FPR/MPR/AN of a pseudo-label dump against its corpus. A pseudo label
    is false if it matches no ground truth at the IoU threshold; a ground
    truth is missed if no pseudo label matched it."""
    total_pseudo = 0
    total_neighbor = 0
    false_pseudo = 0
    total_gt = 0
    missed = 0
    for record in records:
        scene = scenes_by_id.get(record["scene_id"])
        if scene is None:
            raise ValueError(f"dump references unknown scene '{record['scene_id']}'")
        gts = scene_gt_in_grid(scene, grid)
        preds = _record_boxes(record, PSEUDO_SOURCES)
        total_neighbor += sum(
            1 for row in record["labels"] if row["source"] == LabelSource.NEIGHBOR.value
        )
        tp_flags, matched = match_predictions(preds, gts, iou_threshold)
        total_pseudo += len(preds)
        false_pseudo += len(tp_flags) - sum(tp_flags)
        total_gt += len(gts)
        missed += len(matched) - sum(matched)
    frames = max(1, len(records))
    flags = []
    if total_pseudo == 0:
        flags.append("zero_pseudo_labels")
        log.warning("pseudo-label dump holds no pseudo labels; FPR defined as 0")
    fpr = false_pseudo / total_pseudo if total_pseudo else 0.0
    mpr = missed / total_gt if total_gt else 0.0
    if total_gt == 0:
        flags.append("zero_gt")
    return MetricsReport(
        ap={},
        counts={
            "pseudo": total_pseudo,
            "false_pseudo": false_pseudo,
            "neighbor": total_neighbor,
            "gt": total_gt,
            "missed_gt": missed,
            "frames": len(records),
        },
        fpr=fpr,
        mpr=mpr,
        an=total_pseudo / frames,
        an_with_neighbors=(total_pseudo + total_neighbor) / frames,
        flags=tuple(flags),
    )
