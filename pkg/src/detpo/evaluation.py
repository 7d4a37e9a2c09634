"""Greedy matching, COCO-style AP/mAP, per-image F1, confusion matrices and TIDE-style error counts."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import ClassSpec, DatasetSplit, GroundTruthBox
from .geometry import BoundingBox, iou

COCO_IOU_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# k/100 exactly; linspace is off by one ulp at some points, which drops e.g. recall 0.7
RECALL_POINTS = np.arange(101) / 100
MAX_DETS = 100


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_id: int
    box: BoundingBox
    score: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")

    def with_score(self, score: float) -> "Detection":
        return replace(self, score=score)


@dataclass
class MatchResult:
    pairs: list[tuple[Detection, GroundTruthBox, float]]
    unmatched_detections: list[Detection]
    unmatched_ground_truths: list[GroundTruthBox]
    iou_threshold: float

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_detections)

    @property
    def fn(self) -> int:
        return len(self.unmatched_ground_truths)


def rank(detections: Iterable[Detection]) -> list[Detection]:
    """Descending score, ties kept in input order."""
    return sorted(detections, key=lambda d: -d.score)


def greedy_match(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruthBox],
    iou_threshold: float = 0.5,
    class_agnostic: bool = False,
) -> MatchResult:
    """Match each detection, in score order, to the best-overlapping free ground truth.

    Ground truths on other images never match. Same class is required unless
    ``class_agnostic``. Equal IoUs resolve to the earlier ground truth.
    """
    taken = [False] * len(ground_truths)
    pairs = []
    unmatched = []
    for det in rank(detections):
        best, best_iou = -1, iou_threshold
        for j, gt in enumerate(ground_truths):
            if taken[j] or gt.image_id != det.image_id:
                continue
            if not class_agnostic and gt.class_id != det.class_id:
                continue
            if gt.box.area <= 0:
                continue
            v = iou(det.box, gt.box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best < 0:
            unmatched.append(det)
        else:
            taken[best] = True
            pairs.append((det, ground_truths[best], best_iou))
    missed = [gt for j, gt in enumerate(ground_truths) if not taken[j]]
    return MatchResult(pairs, unmatched, missed, iou_threshold)


def per_image_f1(
    detections: Sequence[Detection], ground_truths: Sequence[GroundTruthBox], iou_threshold: float = 0.5
) -> tuple[float, float, float]:
    """Precision, recall and F1 of one image. An empty image with no detections scores 1.0."""
    if not detections and not ground_truths:
        return 1.0, 1.0, 1.0
    m = greedy_match(detections, ground_truths, iou_threshold)
    precision = m.tp / len(detections) if detections else 0.0
    recall = m.tp / len(ground_truths) if ground_truths else 0.0
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def _interpolated_ap(scores: list[float], tps: list[bool], n_gt: int) -> float:
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if not scores:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=float), kind="mergesort")
    tp = np.asarray(tps, dtype=float)[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope: best precision at any recall at or beyond this point
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros_like(RECALL_POINTS)
    valid = idx < len(precision)
    q[valid] = precision[idx[valid]]
    return float(q.mean())


class _ClassTables:
    """Per-(image, class) ranked detections and IoU matrices, reused across thresholds."""

    def __init__(self, detections: Sequence[Detection], split: DatasetSplit, class_id: int, max_dets: int):
        self.cells = []
        dets_by_image: dict[int, list[Detection]] = {}
        for d in detections:
            if d.class_id == class_id:
                dets_by_image.setdefault(d.image_id, []).append(d)
        self.n_gt = 0
        for im in split.images:
            gts = [g for g in split.gt_by_image[im.image_id] if g.class_id == class_id]
            dets = rank(dets_by_image.get(im.image_id, []))[:max_dets]
            self.n_gt += len(gts)
            if not dets and not gts:
                continue
            ious = np.zeros((len(dets), len(gts)))
            for i, d in enumerate(dets):
                for j, g in enumerate(gts):
                    if g.box.area > 0:
                        ious[i, j] = iou(d.box, g.box)
            self.cells.append((dets, ious))

    def ap(self, threshold: float) -> float:
        scores: list[float] = []
        tps: list[bool] = []
        for dets, ious in self.cells:
            taken = np.zeros(ious.shape[1], dtype=bool)
            for i, d in enumerate(dets):
                best, best_iou = -1, threshold
                for j in range(ious.shape[1]):
                    v = ious[i, j]
                    if taken[j] or v <= 0:
                        continue
                    if v >= best_iou and (best < 0 or v > best_iou):
                        best, best_iou = j, v
                if best >= 0:
                    taken[best] = True
                scores.append(d.score)
                tps.append(best >= 0)
        return _interpolated_ap(scores, tps, self.n_gt)


def average_precision(
    detections: Sequence[Detection],
    split: DatasetSplit,
    class_id: int,
    iou_threshold: float = 0.5,
    max_dets: int = MAX_DETS,
) -> float | None:
    """101-point interpolated AP of one class; ``None`` when the class has no ground truth."""
    tables = _ClassTables(detections, split, class_id, max_dets)
    if tables.n_gt == 0:
        return None
    return tables.ap(iou_threshold)


@dataclass
class EvalResult:
    iou_thresholds: tuple[float, ...]
    ap: dict[int, list[float]]
    class_ap: dict[int, float]
    map: float
    per_image: dict[int, tuple[float, float, float]]
    matches: dict[tuple[int, int], MatchResult] = field(repr=False)
    class_names: dict[int, str] = field(default_factory=dict)

    @property
    def fp_count(self) -> int:
        return sum(m.fp for m in self.matches.values())

    @property
    def fn_count(self) -> int:
        return sum(m.fn for m in self.matches.values())

    @property
    def is_perfect(self) -> bool:
        return self.fp_count == 0 and self.fn_count == 0

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "iou_thresholds": list(self.iou_thresholds),
            "classes": [
                {
                    "class_id": cid,
                    "name": self.class_names.get(cid, str(cid)),
                    "ap": self.class_ap[cid],
                    "ap50": self.ap[cid][0],
                    "ap_per_threshold": self.ap[cid],
                }
                for cid in sorted(self.class_ap)
            ],
            "per_image": [
                {"image_id": iid, "precision": p, "recall": r, "f1": f}
                for iid, (p, r, f) in sorted(self.per_image.items())
            ],
            "tp50": sum(m.tp for m in self.matches.values()),
            "fp50": self.fp_count,
            "fn50": self.fn_count,
        }


def coco_map(
    detections: Sequence[Detection],
    split: DatasetSplit,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    max_dets: int = MAX_DETS,
    class_ids: Iterable[int] | None = None,
) -> EvalResult:
    """mAP averaged over IoU thresholds and over classes that have ground truth.

    ``class_ids`` restricts evaluation (detections and ground truth) to those classes.
    """
    wanted = set(class_ids) if class_ids is not None else {c.class_id for c in split.classes}
    dets = [d for d in detections if d.class_id in wanted and d.image_id in split.image_index]
    ap: dict[int, list[float]] = {}
    for cid in sorted(wanted):
        tables = _ClassTables(dets, split, cid, max_dets)
        if tables.n_gt:
            ap[cid] = [tables.ap(t) for t in iou_thresholds]
    class_ap = {cid: float(np.mean(v)) for cid, v in ap.items()}
    mean_ap = float(np.mean(list(class_ap.values()))) if class_ap else 0.0

    dets_by_image: dict[int, list[Detection]] = {}
    for d in dets:
        dets_by_image.setdefault(d.image_id, []).append(d)
    per_image = {}
    matches = {}
    for im in split.images:
        im_dets = dets_by_image.get(im.image_id, [])
        im_gts = [g for g in split.gt_by_image[im.image_id] if g.class_id in wanted]
        per_image[im.image_id] = per_image_f1(im_dets, im_gts)
        for cid in sorted(wanted):
            cd = [d for d in im_dets if d.class_id == cid]
            cg = [g for g in im_gts if g.class_id == cid]
            if cd or cg:
                matches[(im.image_id, cid)] = greedy_match(cd, cg, 0.5)
    names = {c.class_id: c.name for c in split.classes}
    return EvalResult(tuple(iou_thresholds), ap, class_ap, mean_ap, per_image, matches, names)


@dataclass
class ConfusionMatrix:
    """Rows: ground-truth class then background. Columns: predicted class then missed."""

    counts: np.ndarray
    class_names: list[str]

    @property
    def background(self) -> int:
        return len(self.class_names)

    def to_dict(self) -> dict:
        return {"labels": self.class_names + ["background/missed"], "counts": self.counts.tolist()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gt\\pred"] + self.class_names + ["missed"])
        for name, row in zip(self.class_names + ["background"], self.counts.tolist()):
            w.writerow([name] + row)
        return buf.getvalue()


def confusion_matrix(
    detections: Sequence[Detection],
    split: DatasetSplit,
    iou_threshold: float = 0.5,
    score_threshold: float = 0.3,
) -> ConfusionMatrix:
    """Class-agnostic greedy matching of confident detections to ground truth."""
    n = len(split.classes)
    counts = np.zeros((n + 1, n + 1), dtype=int)
    kept = [d for d in detections if d.score >= score_threshold and d.image_id in split.image_index]
    by_image: dict[int, list[Detection]] = {}
    for d in kept:
        by_image.setdefault(d.image_id, []).append(d)
    for im in split.images:
        m = greedy_match(by_image.get(im.image_id, []), split.gt_by_image[im.image_id], iou_threshold, class_agnostic=True)
        for det, gt, _ in m.pairs:
            counts[gt.class_id, det.class_id] += 1
        for det in m.unmatched_detections:
            counts[n, det.class_id] += 1
        for gt in m.unmatched_ground_truths:
            counts[gt.class_id, n] += 1
    return ConfusionMatrix(counts, [c.name for c in split.classes])


TIDE_KINDS = ("Cls", "Loc", "Both", "Dupe", "Bkg", "Miss")


@dataclass
class TideReport:
    counts: dict[str, int]
    fp_total: int
    fn_total: int
    assignments: list[tuple[Detection, str]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"counts": dict(self.counts), "fp_total": self.fp_total, "fn_total": self.fn_total}


def tide_decompose(
    detections: Sequence[Detection],
    split: DatasetSplit,
    pos_threshold: float = 0.5,
    bg_threshold: float = 0.1,
) -> TideReport:
    """Assign every false positive one error kind and count unexplained misses.

    Precedence per false positive: Bkg, Cls, Loc, Dupe, Both. A missed ground
    truth is not counted as Miss when a Loc or Cls error already points at it.
    """
    counts = dict.fromkeys(TIDE_KINDS, 0)
    assignments: list[tuple[Detection, str]] = []
    fp_total = fn_total = 0
    by_image: dict[int, list[Detection]] = {}
    for d in detections:
        if d.image_id in split.image_index:
            by_image.setdefault(d.image_id, []).append(d)
    for im in split.images:
        gts = split.gt_by_image[im.image_id]
        dets = by_image.get(im.image_id, [])
        m = greedy_match(dets, gts, pos_threshold)
        explained: set[int] = set()
        fp_total += m.fp
        for det in m.unmatched_detections:
            same = [(iou(det.box, g.box), k) for k, g in enumerate(gts) if g.class_id == det.class_id]
            other = [(iou(det.box, g.box), k) for k, g in enumerate(gts) if g.class_id != det.class_id]
            best_same = max(same, default=(0.0, -1))
            best_other = max(other, default=(0.0, -1))
            if max(best_same[0], best_other[0]) < bg_threshold:
                kind = "Bkg"
            elif best_other[0] >= pos_threshold:
                kind = "Cls"
                explained.add(best_other[1])
            elif bg_threshold <= best_same[0] < pos_threshold:
                kind = "Loc"
                explained.add(best_same[1])
            elif best_same[0] >= pos_threshold:
                kind = "Dupe"
            else:
                kind = "Both"
            counts[kind] += 1
            assignments.append((det, kind))
        missed_ids = {id(g) for g in m.unmatched_ground_truths}
        fn_total += len(missed_ids)
        explained_ids = {id(gts[k]) for k in explained}
        counts["Miss"] += len(missed_ids - explained_ids)
    return TideReport(counts, fp_total, fn_total, assignments)


# --- detections JSON lines -------------------------------------------------


def detection_to_json(det: Detection, classes: Sequence[ClassSpec]) -> dict:
    return {
        "image_id": det.image_id,
        "category_id": classes[det.class_id].coco_id,
        "bbox": det.box.as_list(),
        "score": det.score,
    }


def write_detections(path: str | Path, detections: Iterable[Detection], classes: Sequence[ClassSpec]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            fh.write(json.dumps(detection_to_json(d, classes)) + "\n")


def read_detections(path: str | Path, classes: Sequence[ClassSpec]) -> list[Detection]:
    by_cat = {c.coco_id: c.class_id for c in classes}
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if row["category_id"] not in by_cat:
                raise ValueError(f"{path}:{lineno}: unknown category id {row['category_id']}")
            box = BoundingBox(*(float(v) for v in row["bbox"])).normalized()
            score = min(1.0, max(0.0, float(row.get("score", 1.0))))
            out.append(Detection(int(row["image_id"]), by_cat[row["category_id"]], box, score))
    return out
