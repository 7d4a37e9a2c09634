"""Confidence handling: score defaults and yes/no-probability re-ranking."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import prompts
from .backend import AuthenticationError, Backend, BackendError, CapabilityError, ChatRequest, ImagePart, yes_no_from_logprobs
from .dataset import DatasetSplit
from .evaluation import Detection
from .trace import Trace

# p_yes + p_no below this is treated as "no signal"
PROB_EPS = 1e-12


def normalize_score(score) -> float:
    """Absent or non-numeric scores become 1.0; numeric ones are clamped to [0, 1]."""
    if score is None or isinstance(score, bool):
        return 1.0
    try:
        value = float(score)
    except (TypeError, ValueError):
        return 1.0
    if math.isnan(value):
        return 1.0
    return min(1.0, max(0.0, value))


def apply_score_defaults(detections: Iterable[Detection | Mapping]) -> list[Detection]:
    out = []
    for d in detections:
        if isinstance(d, Detection):
            out.append(d.with_score(normalize_score(d.score)))
        else:
            out.append(Detection(d["image_id"], d["class_id"], d["box"], normalize_score(d.get("score"))))
    return out


def vqa_score(p_yes: float, p_no: float) -> float | None:
    total = p_yes + p_no
    if total <= PROB_EPS:
        return None
    return p_yes / total


@dataclass
class AuditRow:
    index: int
    image_id: int
    class_id: int
    p_yes: float | None
    p_no: float | None
    original_score: float
    score: float
    flag: str | None = None

    def to_dict(self) -> dict:
        return {
            "detection_id": self.index,
            "image_id": self.image_id,
            "class_id": self.class_id,
            "p_yes": self.p_yes,
            "p_no": self.p_no,
            "original_score": self.original_score,
            "score": self.score,
            "flag": self.flag,
        }


def vqa_request(backend: Backend, det: Detection, split: DatasetSplit, definition: str) -> ChatRequest:
    spec = split.classes[det.class_id]
    text = prompts.render("vqa-score", prompt=spec.name, dataset_instructions=definition)
    image = ImagePart(split.image_index[det.image_id], ((det.box, "red"),))
    return ChatRequest(prompts.render("system"), (image, text), 0.0, 1, True, kind="vqa")


def vqa_rescore(
    detections: Sequence[Detection],
    split: DatasetSplit,
    backend: Backend,
    definitions: Mapping[int, str] | None = None,
    jobs: int = 1,
    trace: Trace | None = None,
) -> tuple[list[Detection], list[AuditRow]]:
    """One yes/no query per detection; only scores change, order is preserved."""
    if not backend.supports_logprobs:
        raise CapabilityError("scoring backend must expose token log-probabilities")
    definitions = definitions or {}
    reqs = [
        vqa_request(backend, d, split, definitions.get(d.class_id) or split.classes[d.class_id].seed_prompt())
        for d in detections
    ]

    def run(req: ChatRequest):
        try:
            resp = backend.complete(req)
        except AuthenticationError:
            raise
        except BackendError as exc:
            return None, None, f"query failed: {type(exc).__name__}"
        try:
            p_yes, p_no = yes_no_from_logprobs(resp)
        except BackendError as exc:
            return resp, None, f"no yes/no probabilities: {exc}"
        return resp, (p_yes, p_no), None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run, reqs))
    else:
        outcomes = [run(r) for r in reqs]

    rescored: list[Detection] = []
    audit: list[AuditRow] = []
    for i, (det, req, (resp, probs, flag)) in enumerate(zip(detections, reqs, outcomes)):
        p_yes = p_no = None
        score = det.score
        if probs is not None:
            p_yes, p_no = probs
            value = vqa_score(p_yes, p_no)
            if value is None:
                flag = "p_yes + p_no is zero"
            else:
                score = value
        if trace is not None and resp is not None:
            trace.request(req, resp, "rerank", image_id=det.image_id, class_id=det.class_id, detection_id=i)
        rescored.append(det.with_score(score))
        audit.append(AuditRow(i, det.image_id, det.class_id, p_yes, p_no, det.score, score, flag))
    return rescored, audit


def write_audit(path: str | Path, rows: Iterable[AuditRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
