"""Severity scores for false positives and false negatives, and worst-error selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Collection, Iterable, Sequence

from .dataset import DatasetSplit, GroundTruthBox
from .evaluation import Detection, EvalResult
from .geometry import BoundingBox, iou

FP_OVERLAP_FLOOR = 0.2
_FLOOR_DIVISOR = 5  # 1 / FP_OVERLAP_FLOOR


@dataclass(frozen=True)
class ErrorRecord:
    kind: str  # "false-positive" | "false-negative" | "best-match"
    image_id: int
    box: BoundingBox
    severity: float
    score: float | None = None
    support: dict[str, Any] = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "image_id": self.image_id,
            "box": self.box.as_list(),
            "severity": self.severity,
            "score": self.score,
            "support": self.support,
        }


def fp_severity(det: Detection, other_class_gts: Iterable[GroundTruthBox]) -> tuple[float, GroundTruthBox | None]:
    """``score * max(0.2, IoU with the nearest other-class box)``, plus that box."""
    nearest, best = None, 0.0
    for g in other_class_gts:
        if g.image_id != det.image_id:
            continue
        v = iou(det.box, g.box)
        if nearest is None or v > best:
            nearest, best = g, v
    if best > FP_OVERLAP_FLOOR:
        return det.score * best, nearest
    # 0.2 has no exact binary form; dividing by 5 rounds once, so 0.9 -> 0.18 exactly
    return det.score / _FLOOR_DIVISOR, nearest


def fn_severity(gt: GroundTruthBox, class_detections: Iterable[Detection]) -> tuple[float, float, Detection | None]:
    """Return ``(1 - sigma, sigma, best detection)`` where sigma = max score * IoU."""
    sigma, best = 0.0, None
    for d in class_detections:
        if d.image_id != gt.image_id:
            continue
        v = d.score * iou(d.box, gt.box)
        if v > sigma:
            sigma, best = v, d
    return 1.0 - sigma, sigma, best


def _argmax(records: Sequence[ErrorRecord]) -> ErrorRecord | None:
    if not records:
        return None
    return min(records, key=lambda r: (-r.severity, r.image_id, r.box.sort_key()))


def select_worst_errors(
    result: EvalResult,
    split: DatasetSplit,
    class_id: int,
    exclude: Collection[int] = (),
) -> tuple[ErrorRecord | None, ErrorRecord | None, ErrorRecord | None]:
    """Worst false positive, worst false negative, and best correct detection of one class.

    Errors on images in ``exclude`` are skipped; the exemplar is not subject to exclusion.
    Recording the chosen image ids is left to the caller.
    """
    fps: list[ErrorRecord] = []
    fns: list[ErrorRecord] = []
    hits: list[ErrorRecord] = []
    for (image_id, cid), m in sorted(result.matches.items()):
        if cid != class_id:
            continue
        class_dets = [d for d, _, _ in m.pairs] + list(m.unmatched_detections)
        for det, gt, v in m.pairs:
            hits.append(ErrorRecord("best-match", image_id, det.box, det.score * v, det.score, {"gt_box": gt.box.as_list(), "iou": v}))
        if image_id in exclude:
            continue
        others = [g for g in split.gt_by_image.get(image_id, []) if g.class_id != class_id]
        for det in m.unmatched_detections:
            sev, nearest = fp_severity(det, others)
            support: dict[str, Any] = {"nearest_other_gt": None}
            if nearest is not None:
                support = {
                    "nearest_other_gt": nearest.box.as_list(),
                    "nearest_other_class": nearest.class_id,
                    "iou": iou(det.box, nearest.box),
                }
            fps.append(ErrorRecord("false-positive", image_id, det.box, sev, det.score, support))
        for gt in m.unmatched_ground_truths:
            sev, sigma, best = fn_severity(gt, class_dets)
            support = {"sigma": sigma, "best_detection": None}
            if best is not None:
                support.update(best_detection=best.box.as_list(), best_score=best.score, iou=iou(best.box, gt.box))
            fns.append(ErrorRecord("false-negative", image_id, gt.box, sev, None, support))
    return _argmax(fps), _argmax(fns), _argmax(hits)
