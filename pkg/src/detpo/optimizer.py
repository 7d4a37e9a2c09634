"""Per-class prompt optimization: bootstrap, error-driven refinement, validation selection."""

from __future__ import annotations

import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

from pydantic import BaseModel, Field

from . import prompts
from .backend import Backend, BackendError, ChatRequest, ImagePart
from .dataset import ClassSpec, DatasetSplit, GroundTruthBox, subsample_k_shot
from .detect import detection_request, run_request
from .evaluation import Detection, EvalResult, coco_map
from .geometry import BoundingBox
from .mining import ErrorRecord, select_worst_errors
from .prompts import ExtractionError, extract_definition
from .trace import Trace

log = logging.getLogger(__name__)

# Stage-3 tie-break order, highest priority first.
PROVENANCE_PRIORITY = ("best", "final", "alternative", "stage1", "seed")


class OptimizerConfig(BaseModel):
    t_max: int = Field(10, ge=1)
    k_shot: int | None = Field(None, ge=1)
    iou_threshold: float = Field(0.5, gt=0, le=1)
    seed: int = 0
    max_refine_retries: int = Field(1, ge=0)
    jobs: int = Field(1, ge=1)
    validation: Literal["train", "split"] = "train"


@dataclass
class PromptCandidate:
    class_id: int
    text: str
    provenance: str
    iteration: int | None = None
    train_map: float | None = None
    val_map: float | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("candidate text must be non-empty")


@dataclass
class OptimizationState:
    class_id: int
    current: str
    previous: str
    accepted_map: float
    best: str
    best_map: float
    t_max: int
    t: int = 0
    excluded: set[int] = field(default_factory=set)
    accepted_history: list[float] = field(default_factory=list)
    reverts: int = 0
    done: bool = False
    stop_reason: str | None = None


@dataclass
class ClassResult:
    spec: ClassSpec
    final: PromptCandidate
    candidates: list[PromptCandidate]
    trace: Trace
    status: str = "ok"
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "class_id": self.spec.class_id,
            "definition": self.final.text,
            "provenance": self.final.provenance,
            "train_map": self.final.train_map,
            "val_map": self.final.val_map,
            "status": self.status,
        }


Evaluator = Callable[[str], float]


class ClassOptimizer:
    """Optimizes the definition of one class. Not thread-safe; one instance per class."""

    def __init__(
        self,
        spec: ClassSpec,
        train: DatasetSplit,
        backend: Backend,
        config: OptimizerConfig | None = None,
        val: DatasetSplit | None = None,
        trace: Trace | None = None,
    ):
        self.spec = spec
        self.train = train
        self.val = val
        self.backend = backend
        self.config = config or OptimizerConfig()
        self.rng = random.Random(f"{self.config.seed}:{spec.class_id}")
        self.trace = trace or Trace(class_id=spec.class_id, class_name=spec.name)
        self._evals: dict[tuple[str, str], EvalResult] = {}
        self.system = prompts.render("system")

    # --- plumbing ----------------------------------------------------------

    def _complete(self, req: ChatRequest, stage: str, iteration: int | None = None):
        resp = self.backend.complete(req)
        self.trace.request(req, resp, "optimization", stage=stage, iteration=iteration)
        return resp

    def _refine_request(self, text: str, images: Sequence[ImagePart], kind: str) -> ChatRequest:
        d = self.backend.descriptor
        return ChatRequest(self.system, (*images, text), d.refine_temperature, d.max_tokens, kind=kind)

    def _ask_definition(self, req: ChatRequest, stage: str, iteration: int | None = None) -> str | None:
        """Send a refinement request; retry once if no definition comes back."""
        for attempt in range(self.config.max_refine_retries + 1):
            resp = self._complete(req, stage, iteration)
            try:
                found = extract_definition(resp.text, self.spec.name)
            except ExtractionError as exc:
                self.trace.event("extraction-failed", stage=stage, iteration=iteration, attempt=attempt, reason=str(exc))
                continue
            self.trace.event("definition", stage=stage, iteration=iteration, quality=found.quality, text=found.text)
            return found.text
        return None

    def evaluate(self, text: str, split: DatasetSplit, stage: str, iteration: int | None = None) -> EvalResult:
        key = (split.role, text)
        if key in self._evals:
            return self._evals[key]
        dets: list[Detection] = []
        for im in split.images:
            req = detection_request(self.backend, im, self.spec, text)
            parsed = run_request(self.backend, im, req, [self.spec_in(split)], self.trace, "optimization", stage=stage, iteration=iteration)
            dets.extend(parsed.detections)
        result = coco_map(dets, split, class_ids=[self.spec.class_id])
        self._evals[key] = result
        return result

    def spec_in(self, split: DatasetSplit) -> ClassSpec:
        return split.classes[self.spec.class_id]

    def _gt_instances(self, class_id: int, image_id: int) -> list[GroundTruthBox]:
        return [g for g in self.train.gt_by_image[image_id] if g.class_id == class_id]

    # --- stage 1 -----------------------------------------------------------

    def stage1_bootstrap(self) -> PromptCandidate:
        c = self.spec.class_id
        positives = self.train.images_with_class(c)
        if not positives:
            raise ValueError(f"class {self.spec.name!r} has no training instances")
        parts: list = [ImagePart(im, tuple((g.box, "green") for g in self._gt_instances(c, im.image_id))) for im in positives]
        text = prompts.render("init-summarize")
        seed = self.spec.seed_prompt()
        if seed != self.spec.name:
            text += f"\n\nPrior description of the '{self.spec.name}' class from the dataset documentation:\n{seed}"
        req = self._refine_request(text, parts, "summarize")
        resp = self._complete(req, "stage1")
        definition = None
        try:
            found = extract_definition(resp.text, self.spec.name)
            definition = found.text if found.quality == "mapping" else resp.text.strip()
        except ExtractionError:
            self.trace.event("extraction-failed", stage="stage1", reason="empty summarize output")
        current = definition or seed

        for other in self.train.classes:
            if other.class_id == c:
                continue
            negatives = self.train.images_with_class(other.class_id)
            if not negatives:
                self.trace.event("contrastive-skipped", stage="stage1", negative_class=other.name, reason="no images")
                continue
            neg_im = self.rng.choice(negatives)
            neg_gt = self.rng.choice(self._gt_instances(other.class_id, neg_im.image_id))
            pos_im = self.rng.choice(positives)
            pos_gt = self.rng.choice(self._gt_instances(c, pos_im.image_id))
            text = prompts.render("refine-contrastive", class_name=self.spec.name, current_instructions=current)
            req = self._refine_request(
                text, [ImagePart(pos_im, ((pos_gt.box, "green"),)), ImagePart(neg_im, ((neg_gt.box, "red"),))], "contrastive"
            )
            resp = self._complete(req, "stage1")
            try:
                current = extract_definition(resp.text, self.spec.name).text
            except ExtractionError:
                self.trace.event("contrastive-skipped", stage="stage1", negative_class=other.name, reason="no definition")
        self.trace.event("candidate", provenance="stage1", text=current)
        return PromptCandidate(c, current, "stage1")

    # --- stage 2 -----------------------------------------------------------

    def init_state(self, stage1: PromptCandidate) -> tuple[OptimizationState, EvalResult]:
        ev = self.evaluate(stage1.text, self.train, "stage2", 0)
        stage1.train_map = ev.map
        state = OptimizationState(
            self.spec.class_id, stage1.text, stage1.text, ev.map, stage1.text, ev.map, self.config.t_max
        )
        state.accepted_history.append(ev.map)
        self.trace.event("iteration", iteration=0, action="initial", map=ev.map, accepted_map=ev.map, best_map=ev.map)
        return state, ev

    def _fallback_exemplar(self) -> ErrorRecord:
        gts = self.train.gt_by_class[self.spec.class_id]
        g = self.rng.choice(gts)
        return ErrorRecord("best-match", g.image_id, g.box, 0.0, None, {"gt_box": g.box.as_list(), "fallback": True})

    def stage2_iterate(self, state: OptimizationState) -> OptimizationState:
        """One refinement iteration: mine errors, refine (FN first, then FP), accept or revert."""
        if state.done:
            return state
        if state.t >= state.t_max:
            state.done, state.stop_reason = True, "budget"
            return state
        ev = self.evaluate(state.current, self.train, "stage2", state.t)
        if ev.is_perfect:
            state.done, state.stop_reason = True, "perfect"
            self.trace.event("early-stop", iteration=state.t, reason="perfect", map=ev.map)
            return state
        fp, fn, exemplar = select_worst_errors(ev, self.train, self.spec.class_id, state.excluded)
        if fp is None and fn is None:
            state.done, state.stop_reason = True, "no-errors"
            self.trace.event("early-stop", iteration=state.t, reason="no selectable errors", map=ev.map)
            return state
        state.t += 1
        t = state.t
        exemplar = exemplar or self._fallback_exemplar()
        green_box = BoundingBox(*exemplar.support.get("gt_box", exemplar.box.as_list()))
        green = ImagePart(self.train.image_index[exemplar.image_id], ((green_box, "green"),))
        for rec in (fn, fp):
            if rec is not None:
                state.excluded.add(rec.image_id)

        candidate = state.current
        if fn is not None:
            text = prompts.render("refine-include-fn", class_name=self.spec.name, current_instructions=candidate)
            blue = ImagePart(self.train.image_index[fn.image_id], ((fn.box, "blue"),))
            candidate = self._ask_definition(self._refine_request(text, [green, blue], "refine-fn"), "stage2", t) or candidate
        if fp is not None:
            text = prompts.render("refine-exclude-fp", class_name=self.spec.name, current_instructions=candidate)
            red = ImagePart(self.train.image_index[fp.image_id], ((fp.box, "red"),))
            candidate = self._ask_definition(self._refine_request(text, [green, red], "refine-fp"), "stage2", t) or candidate

        new_ev = self.evaluate(candidate, self.train, "stage2", t)
        if new_ev.map >= state.accepted_map:
            action = "accept"
            state.previous, state.current, state.accepted_map = state.current, candidate, new_ev.map
        else:
            action = "revert"
            state.reverts += 1
        if new_ev.map > state.best_map:
            state.best, state.best_map = candidate, new_ev.map
        state.accepted_history.append(state.accepted_map)
        self.trace.event(
            "iteration",
            iteration=t,
            action=action,
            map=new_ev.map,
            accepted_map=state.accepted_map,
            best_map=state.best_map,
            excluded=sorted(state.excluded),
            errors=[r.to_dict() for r in (fn, fp, exemplar) if r is not None],
        )
        if t >= state.t_max:
            state.done, state.stop_reason = True, "budget"
        return state

    def run_stage2(self, stage1: PromptCandidate) -> OptimizationState:
        state, _ = self.init_state(stage1)
        while not state.done:
            self.stage2_iterate(state)
        return state

    # --- stage 3 -----------------------------------------------------------

    def generate_alternative(self, best: str) -> str | None:
        text = prompts.render("generate-alternative", class_name=self.spec.name, best_instructions=best)
        d = self.backend.descriptor
        req = ChatRequest(self.system, (text,), d.refine_temperature, d.max_tokens, kind="alternative")
        return self._ask_definition(req, "stage3")

    def stage3_select(
        self, candidates: Sequence[PromptCandidate], val: DatasetSplit | None, evaluator: Evaluator | None = None
    ) -> PromptCandidate:
        """Highest validation mAP wins; ties go to the higher-priority provenance."""
        ordered = sorted(candidates, key=lambda p: PROVENANCE_PRIORITY.index(p.provenance))
        distinct: list[PromptCandidate] = []
        seen: set[str] = set()
        for cand in ordered:
            if cand.text not in seen:
                seen.add(cand.text)
                distinct.append(cand)
        best_cand = distinct[0]
        if evaluator is None and (val is None or not val.images):
            log.warning("class %s: empty validation split, keeping the best training prompt", self.spec.name)
            self.trace.event("selection", reason="empty validation split", selected=best_cand.provenance)
            return best_cand
        if evaluator is None:
            evaluator = lambda text: self.evaluate(text, val, "stage3").map  # noqa: E731
        winner = None
        for cand in distinct:
            cand.val_map = evaluator(cand.text)
            self.trace.event("candidate-eval", provenance=cand.provenance, val_map=cand.val_map)
            if winner is None or cand.val_map > winner.val_map:
                winner = cand
        for cand in candidates:
            if cand.val_map is None:
                dup = next(p for p in distinct if p.text == cand.text)
                cand.val_map = dup.val_map
        self.trace.event("selection", selected=winner.provenance, val_map=winner.val_map)
        return winner

    # --- full run ----------------------------------------------------------

    def optimize(self) -> ClassResult:
        seed = PromptCandidate(self.spec.class_id, self.spec.seed_prompt(), "seed")
        stage1 = self.stage1_bootstrap()
        state = self.run_stage2(stage1)
        best = PromptCandidate(self.spec.class_id, state.best, "best", train_map=state.best_map)
        final = PromptCandidate(self.spec.class_id, state.current, "final", state.t, state.accepted_map)
        candidates = [seed, stage1, best, final]
        alt_text = self.generate_alternative(state.best)
        if alt_text:
            candidates.append(PromptCandidate(self.spec.class_id, alt_text, "alternative"))
        val = self.val if self.val is not None else self.train
        for cand in candidates:
            if cand.train_map is None and (self.train.role, cand.text) in self._evals:
                cand.train_map = self._evals[(self.train.role, cand.text)].map
        chosen = self.stage3_select(candidates, val)
        if chosen.train_map is None and val is self.train:
            chosen.train_map = chosen.val_map
        return ClassResult(self.spec, chosen, candidates, self.trace)


@dataclass
class DatasetResult:
    classes: list[ClassResult]

    def prompt_file(self) -> dict:
        return {r.spec.name: r.to_json() for r in sorted(self.classes, key=lambda r: r.spec.class_id)}

    def write(self, prompt_path: str | Path, trace_dir: str | Path | None = None) -> None:
        Path(prompt_path).parent.mkdir(parents=True, exist_ok=True)
        Path(prompt_path).write_text(json.dumps(self.prompt_file(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        if trace_dir is not None:
            for r in self.classes:
                r.trace.write(Path(trace_dir) / trace_filename(r.spec))


def trace_filename(spec: ClassSpec) -> str:
    slug = re.sub(r"[^A-Za-z0-9]+", "-", spec.name).strip("-").lower() or "class"
    return f"{spec.class_id:03d}-{slug}.jsonl"


def _fallback(spec: ClassSpec, trace: Trace, status: str, error: str) -> ClassResult:
    trace.event("fallback", reason=error)
    cand = PromptCandidate(spec.class_id, spec.seed_prompt(), "seed")
    return ClassResult(spec, cand, [cand], trace, status, error)


def optimize_class(
    spec: ClassSpec,
    train: DatasetSplit,
    backend: Backend,
    config: OptimizerConfig,
    val: DatasetSplit | None = None,
) -> ClassResult:
    trace = Trace(class_id=spec.class_id, class_name=spec.name)
    if not train.gt_by_class.get(spec.class_id):
        return _fallback(spec, trace, "skipped", "no training instances")
    try:
        return ClassOptimizer(spec, train, backend, config, val, trace).optimize()
    except BackendError as exc:
        log.error("class %s failed: %s", spec.name, exc)
        return _fallback(spec, trace, "failed", f"{type(exc).__name__}: {exc}")


def optimize_dataset(
    train: DatasetSplit,
    backend: Backend,
    config: OptimizerConfig | None = None,
    val: DatasetSplit | None = None,
    class_ids: Sequence[int] | None = None,
) -> DatasetResult:
    """Run all three stages for every class independently; classes may run in parallel."""
    config = config or OptimizerConfig()
    if config.k_shot:
        train = subsample_k_shot(train, config.k_shot, config.seed)
    specs = [c for c in train.classes if class_ids is None or c.class_id in class_ids]

    def run(spec: ClassSpec) -> ClassResult:
        return optimize_class(spec, train, backend, config, val)

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(run, specs))
    else:
        results = [run(s) for s in specs]
    return DatasetResult(results)
