"""Parsing untrusted model output: detection lists and yes/no token probabilities."""

from __future__ import annotations

import json
import math
import re
from itertools import islice
from dataclasses import dataclass, field
from typing import Any, Sequence

from ..dataset import ClassSpec, ImageRecord
from ..evaluation import Detection
from ..geometry import BoundingBox, CoordinateSpace, convert
from .base import ChatResponse, LogprobsUnavailable

MAX_DETECTIONS = 20
# start positions tried per scan; bounds the work on pathological outputs
MAX_SCAN_STARTS = 256

_FENCE = re.compile(r"```[A-Za-z0-9_+-]*[ \t]*\n?(.*?)(?:```|\Z)", re.DOTALL)
_decoder = json.JSONDecoder()


@dataclass
class ParseResult:
    detections: list[Detection]
    failed: bool = False
    dropped: int = 0
    notes: list[str] = field(default_factory=list)


def _salvage_objects(text: str, start: int) -> list[Any]:
    """Decode complete objects from a possibly truncated array starting at ``text[start] == '['``."""
    items = []
    pos = start + 1
    while pos < len(text):
        while pos < len(text) and text[pos] in " \t\r\n,":
            pos += 1
        if pos >= len(text) or text[pos] == "]":
            break
        try:
            obj, pos = _decoder.raw_decode(text, pos)
        except (json.JSONDecodeError, RecursionError):
            break
        items.append(obj)
    return items


def _looks_like_detections(value: Any) -> bool:
    return isinstance(value, list) and all(isinstance(v, dict) for v in value)


def extract_json_array(text: str) -> list[Any] | None:
    """First JSON array of objects in ``text``, tolerating fences, prose and truncation."""
    candidates = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    for chunk in candidates:
        for n, m in enumerate(islice(re.finditer(r"\[", chunk), MAX_SCAN_STARTS)):
            try:
                value, _ = _decoder.raw_decode(chunk, m.start())
            except (json.JSONDecodeError, RecursionError):
                continue
            # an empty list only counts as the answer when nothing precedes it
            if _looks_like_detections(value) and (value or n == 0):
                return value
        for m in islice(re.finditer(r"\[\s*\{", chunk), MAX_SCAN_STARTS):
            items = _salvage_objects(chunk, m.start())
            if items and _looks_like_detections(items):
                return items
        for m in islice(re.finditer(r"\{", chunk), MAX_SCAN_STARTS):
            try:
                value, _ = _decoder.raw_decode(chunk, m.start())
            except (json.JSONDecodeError, RecursionError):
                continue
            if isinstance(value, dict):
                for key in ("detections", "objects", "boxes", "results"):
                    if _looks_like_detections(value.get(key)):
                        return value[key]
                if "bbox_2d" in value:
                    return [value]
    return None


def _number(v: Any) -> float | None:
    if isinstance(v, bool):
        return None
    if isinstance(v, (int, float)):
        f = float(v)
    elif isinstance(v, str):
        try:
            f = float(v.strip())
        except ValueError:
            return None
    else:
        return None
    return f if math.isfinite(f) else None


def _norm(label: str) -> str:
    return " ".join(label.split()).casefold()


def parse_detections(
    text: str,
    expected: CoordinateSpace,
    image: ImageRecord,
    classes: Sequence[ClassSpec],
    max_detections: int = MAX_DETECTIONS,
) -> ParseResult:
    """Turn a model's JSON answer into pixel-space detections on ``image``.

    Boxes are read in ``expected`` (per-mille, or pixel in the sent image's
    size), corner-normalized and clamped. Unknown labels, malformed elements,
    degenerate boxes and exact duplicates are dropped; at most
    ``max_detections`` survive, in the model's order.
    """
    raw = extract_json_array(text or "")
    if raw is None:
        return ParseResult([], failed=True, notes=["no JSON array found"])
    names = {_norm(c.name): c.class_id for c in classes}
    target = CoordinateSpace.pixel(image.width, image.height)
    if expected.kind == "pixel" and expected.width is None:
        expected = CoordinateSpace.pixel(image.width, image.height, expected.order)
    out: list[Detection] = []
    seen: set[tuple] = set()
    dropped = 0
    for item in raw:
        bbox = item.get("bbox_2d")
        label = item.get("label")
        values = [_number(v) for v in bbox] if isinstance(bbox, list) and len(bbox) == 4 else None
        if values is None or any(v is None for v in values) or not isinstance(label, str):
            dropped += 1
            continue
        class_id = names.get(_norm(label))
        if class_id is None:
            dropped += 1
            continue
        score = _number(item.get("score"))
        score = 1.0 if score is None else min(1.0, max(0.0, score))
        box = convert(expected.decode(values), expected, target).clamp(image.width, image.height)
        box = BoundingBox(box.x1, box.y1, box.x2, box.y2)
        if box.area <= 0:
            dropped += 1
            continue
        key = (class_id, box.sort_key())
        if key in seen:
            dropped += 1
            continue
        seen.add(key)
        out.append(Detection(image.image_id, class_id, box, score))
    if len(out) > max_detections:
        dropped += len(out) - max_detections
        out = out[:max_detections]
    return ParseResult(out, dropped=dropped)


def serialize_detections(
    detections: Sequence[Detection],
    image: ImageRecord,
    classes: Sequence[ClassSpec],
    space: CoordinateSpace | None = None,
) -> str:
    """Model-style JSON answer for ``detections``; pixel output round-trips exactly through
    :func:`parse_detections`, per-mille output is rounded to integers."""
    pixel = CoordinateSpace.pixel(image.width, image.height)
    space = space or pixel
    if space.kind == "pixel" and space.width is None:
        space = CoordinateSpace.pixel(image.width, image.height, space.order)
    rows = []
    for d in detections:
        box = convert(d.box, pixel, space)
        rows.append({"bbox_2d": space.encode(box), "label": classes[d.class_id].name, "score": d.score})
    return json.dumps(rows)


_YES = "yes"
_NO = "no"


def yes_no_from_logprobs(response: ChatResponse) -> tuple[float, float]:
    """Sum first-token probabilities of Yes/No variants (case and leading whitespace)."""
    if not response.logprobs:
        raise LogprobsUnavailable("response carries no log-probabilities")
    p_yes = p_no = 0.0
    found = False
    for token, lp in response.logprobs.items():
        t = token.lstrip().casefold()
        if t == _YES:
            p_yes += math.exp(lp)
            found = True
        elif t == _NO:
            p_no += math.exp(lp)
            found = True
    if not found:
        raise LogprobsUnavailable("neither Yes nor No appears among the top tokens")
    return p_yes, p_no
