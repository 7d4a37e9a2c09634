"""Detection requests over images: optimized single-class queries and multi-class baselines."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

from . import prompts
from .backend import Backend, ChatRequest, ImagePart, ParseResult, parse_detections
from .dataset import ClassSpec, DatasetSplit, ImageRecord
from .evaluation import Detection
from .trace import Trace

MODES = ("single-class", "multi-class", "with-instructions")


def detection_request(backend: Backend, image: ImageRecord, spec: ClassSpec, definition: str) -> ChatRequest:
    text = prompts.render("detpo-detect", class_name=spec.name, dataset_instructions=definition)
    d = backend.descriptor
    return ChatRequest(
        prompts.render("system"), (ImagePart(image), text), d.detect_temperature, d.max_tokens, kind="detect"
    )


def multi_class_request(
    backend: Backend, image: ImageRecord, classes: Sequence[ClassSpec], definitions: Mapping[int, str] | None = None
) -> ChatRequest:
    names = prompts.category_prompt([c.name for c in classes])
    if definitions is None:
        text = prompts.render("multi-class-detect", category_prompt=names)
    else:
        block = prompts.instruction_block([(c.name, definitions.get(c.class_id, "")) for c in classes])
        text = prompts.render("detect-with-instructions", category_prompt=names, instructions=block)
    d = backend.descriptor
    return ChatRequest(prompts.render("system"), (ImagePart(image), text), d.detect_temperature, d.max_tokens, kind="detect")


def parse_response(backend: Backend, image: ImageRecord, text: str, classes: Sequence[ClassSpec]) -> ParseResult:
    w, h = backend.sent_size(image)
    return parse_detections(text, backend.coordinate_space(w, h), image, classes)


def run_request(
    backend: Backend,
    image: ImageRecord,
    req: ChatRequest,
    classes: Sequence[ClassSpec],
    trace: Trace | None = None,
    phase: str = "detection",
    **context,
) -> ParseResult:
    resp = backend.complete(req)
    parsed = parse_response(backend, image, resp.text, classes)
    if trace is not None:
        _record(trace, req, resp, parsed, image, phase, context)
    return parsed


def _record(trace: Trace, req, resp, parsed: ParseResult, image: ImageRecord, phase: str, context: dict) -> None:
    trace.request(
        req, resp, phase, image_id=image.image_id, n_detections=len(parsed.detections), parse_failed=parsed.failed, **context
    )


@dataclass
class DetectionRun:
    detections: list[Detection]
    requests: int
    parse_failures: int


def detect_split(
    backend: Backend,
    split: DatasetSplit,
    mode: str = "single-class",
    definitions: Mapping[int, str] | None = None,
    trace: Trace | None = None,
    jobs: int = 1,
    class_ids: Sequence[int] | None = None,
) -> DetectionRun:
    """Query every image (and, in single-class mode, every class). Output order is deterministic."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    classes = [c for c in split.classes if class_ids is None or c.class_id in class_ids]
    definitions = definitions or {}
    jobs_list = []
    for im in split.images:
        if mode == "single-class":
            for c in classes:
                text = definitions.get(c.class_id) or c.seed_prompt()
                jobs_list.append((im, detection_request(backend, im, c, text), [c], {"class_id": c.class_id}))
        elif mode == "multi-class":
            jobs_list.append((im, multi_class_request(backend, im, classes), classes, {}))
        else:
            defs = {c.class_id: definitions.get(c.class_id) or c.seed_prompt() for c in classes}
            jobs_list.append((im, multi_class_request(backend, im, classes, defs), classes, {}))

    def run(job):
        im, req, cls, _ = job
        resp = backend.complete(req)
        return resp, parse_response(backend, im, resp.text, cls)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run, jobs_list))
    else:
        outcomes = [run(j) for j in jobs_list]
    # traced after the fact so the log order never depends on thread scheduling
    results = []
    for (im, req, _, ctx), (resp, parsed) in zip(jobs_list, outcomes):
        if trace is not None:
            _record(trace, req, resp, parsed, im, "detection", ctx)
        results.append(parsed)
    dets = [d for r in results for d in r.detections]
    return DetectionRun(dets, len(results), sum(r.failed for r in results))
