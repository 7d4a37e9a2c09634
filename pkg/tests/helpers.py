"""Synthetic datasets and a scripted "world" that answers detection and refinement prompts."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

from detpo.backend import ChatRequest, ScriptedBackend
from detpo.dataset import DatasetSplit, parse_coco
from detpo.geometry import BoundingBox


def coco_dict(images, annotations, names):
    """images: [(id, w, h)], annotations: [(image_id, category_index, [x, y, w, h])]."""
    return {
        "images": [{"id": i, "file_name": f"img{i}.png", "width": w, "height": h} for i, w, h in images],
        "categories": [{"id": k + 1, "name": n} for k, n in enumerate(names)],
        "annotations": [
            {"id": n + 1, "image_id": im, "category_id": c + 1, "bbox": list(b), "area": b[2] * b[3], "iscrowd": 0}
            for n, (im, c, b) in enumerate(annotations)
        ],
    }


def write_dataset(root: Path, images, annotations, names, split="train", metadata=None) -> Path:
    """Roboflow-style export: ``root/<split>/_annotations.coco.json`` plus PNG files."""
    d = root / split
    d.mkdir(parents=True, exist_ok=True)
    for i, w, h in images:
        Image.new("RGB", (w, h), (40 + 10 * (i % 10), 90, 140)).save(d / f"img{i}.png")
    (d / "_annotations.coco.json").write_text(json.dumps(coco_dict(images, annotations, names)))
    if metadata is not None:
        (root / "metadata.json").write_text(json.dumps(metadata))
    return d / "_annotations.coco.json"


def make_split(images, annotations, names, role="train", descriptions=None) -> DatasetSplit:
    meta = {n: {"description": d} for n, d in (descriptions or {}).items()}
    return parse_coco(coco_dict(images, annotations, names), Path("."), meta, role)


def two_class_split(n_images=4, role="train") -> DatasetSplit:
    """Each image holds one 'cat' and one 'dog' box at image-specific offsets."""
    images = [(i, 100, 100) for i in range(n_images)]
    anns = []
    for i in range(n_images):
        anns.append((i, 0, [5 + i, 5, 30, 30]))
        anns.append((i, 1, [55, 50 + i, 30, 30]))
    return make_split(images, anns, ["cat", "dog"], role)


_TAG = re.compile(r"\btag:([A-Za-z0-9_-]+)")
_CLASS = re.compile(r"instances of '([^']+)'")


@dataclass
class Behavior:
    """How the simulated detector behaves under a given definition tag."""

    hit: float = 1.0  # fraction of ground truths found (first ones in sorted order)
    fps: int = 0  # spurious boxes per image, scored above the hits
    fp_score: float = 0.9
    hit_score: float = 0.8


@dataclass
class World:
    """Responder for ScriptedBackend.

    Detection prompts are answered from the ground truth according to the
    ``tag:<name>`` found in the definition; refinement prompts return the next
    definition from ``refinements`` (or a fixed ``tag:<name>`` per kind).
    """

    split: DatasetSplit
    behaviors: dict[str, Behavior] = field(default_factory=dict)
    refinements: list[str] = field(default_factory=list)
    summarize: str = "tag:start"
    alternative: str = "tag:alt"
    contrastive: str | None = None

    def definition_reply(self, cls: str, text: str) -> str:
        return "Here is the update.\n```python {" + repr(cls) + ": " + repr(text) + "}```"

    def detect(self, req: ChatRequest) -> str:
        image = req.images[0].image
        cls_name = _CLASS.search(req.text).group(1)
        spec = self.split.class_by_name(cls_name)
        m = _TAG.search(req.text)
        b = self.behaviors.get(m.group(1) if m else "", Behavior(hit=0.0))
        gts = sorted(
            (g for g in self.split.gt_by_image[image.image_id] if g.class_id == spec.class_id),
            key=lambda g: g.box.sort_key(),
        )
        n_hit = round(b.hit * len(gts))
        rows = [{"bbox_2d": g.box.as_list(), "label": cls_name, "score": b.hit_score} for g in gts[:n_hit]]
        for k in range(b.fps):
            x = 2 + 6 * k
            rows.append({"bbox_2d": [x, 90, x + 5, 98], "label": cls_name, "score": b.fp_score})
        return json.dumps(rows)

    def __call__(self, req: ChatRequest):
        cls_match = re.search(r"'([^']+)' class", req.text)
        cls = cls_match.group(1) if cls_match else "?"
        if req.kind == "detect":
            return self.detect(req)
        if req.kind == "summarize":
            return self.summarize
        if req.kind == "contrastive":
            current = re.search(r"Current class definition of the '[^']+' class:\n\n(.*?)\n\nStep", req.text, re.S)
            text = self.contrastive or (current.group(1) if current else self.summarize)
            return self.definition_reply(cls, text)
        if req.kind in ("refine-fn", "refine-fp"):
            if self.refinements:
                return self.definition_reply(cls, self.refinements.pop(0))
            current = re.search(r"Current class definition of the '[^']+' class:\n\n(.*?)\n\nStep", req.text, re.S)
            return self.definition_reply(cls, current.group(1) if current else self.summarize)
        if req.kind == "alternative":
            return self.definition_reply(cls, self.alternative)
        return None


def world_backend(world: World, **kw) -> ScriptedBackend:
    return ScriptedBackend(responder=world, **kw)


# --- small synthetic evaluation instances -------------------------------------

GT_POOL = [(0, 0, 10, 10), (20, 0, 30, 10), (0, 20, 10, 30), (4, 4, 14, 14)]
SHIFTS = [(0, 0), (1, 0), (2, 0), (3, 0), (4, 1), (0, 5), (6, 6), (30, 30)]
SCORES = [1.0, 0.9, 0.9, 0.5, 0.3, 0.1]


def random_instance(rng, n_det: int, n_gt: int, n_classes: int, n_images: int = 2):
    """Returns (split, detections, oracle_dets, oracle_gts) with integer boxes."""
    from detpo.evaluation import Detection

    images = [(i, 64, 64) for i in range(n_images)]
    gts = []
    for _ in range(n_gt):
        gts.append((rng.randrange(n_images), rng.randrange(n_classes), rng.choice(GT_POOL)))
    dets = []
    for k in range(n_det):
        if gts and rng.random() < 0.75:
            im, c, b = rng.choice(gts)
            if rng.random() < 0.2:
                c = rng.randrange(n_classes)
        else:
            im, c, b = rng.randrange(n_images), rng.randrange(n_classes), rng.choice(GT_POOL)
        dx, dy = rng.choice(SHIFTS)
        box = (b[0] + dx, b[1] + dy, b[2] + dx, b[3] + dy)
        dets.append((im, c, box, rng.choice(SCORES), k))
    anns = [(im, c, [b[0], b[1], b[2] - b[0], b[3] - b[1]]) for im, c, b in gts]
    names = [f"c{i}" for i in range(n_classes)]
    split = make_split(images, anns, names)
    detections = [Detection(im, c, BoundingBox(*map(float, box)), s) for im, c, box, s, _ in dets]
    return split, detections, dets, gts


# --- on-disk fixtures for CLI runs ----------------------------------------------

CLI_IMAGES = [(i, 100, 100) for i in range(4)]
CLI_ANNS = [a for i in range(4) for a in ((i, 0, [5 + i, 5, 30, 30]), (i, 1, [55, 50 + i, 30, 30]))]
CLI_NAMES = ["cat", "dog"]


def cli_dataset(root: Path) -> Path:
    """Roboflow-style export with identical train/valid/test splits."""
    for split in ("train", "valid", "test"):
        write_dataset(root, CLI_IMAGES, CLI_ANNS, CLI_NAMES, split)
    return root


def cli_script(path: Path, good_tag="good") -> Path:
    """Script file for ScriptedBackend: ``tag:<good_tag>`` definitions find every box.

    Summaries and contrastive updates yield ``tag:start`` definitions, which
    find nothing; FN/FP refinements and alternatives propose ``tag:<good_tag>``,
    so Stage 2 reaches a perfect score after one iteration.
    """
    split = make_split(CLI_IMAGES, CLI_ANNS, CLI_NAMES)
    rules = []
    for spec in split.classes:
        for im in split.images:
            rows = [
                {"bbox_2d": g.box.as_list(), "label": spec.name, "score": 0.8}
                for g in split.gt_by_image[im.image_id]
                if g.class_id == spec.class_id
            ]
            rules.append(
                {
                    "kind": "detect",
                    "contains": [f"image:{im.image_id}[", f"instances of '{spec.name}'", f"tag:{good_tag}"],
                    "text": json.dumps(rows),
                }
            )
        for kind in ("contrastive", "refine-fn", "refine-fp", "alternative"):
            tag = "start" if kind == "contrastive" else good_tag
            reply = "```python {" + repr(spec.name) + ": " + repr(f"tag:{tag} {spec.name}") + "}```"
            rules.append({"kind": kind, "contains": [f"'{spec.name}' class"], "text": reply})
    rules.append({"kind": "summarize", "text": "tag:start"})
    rules.append({"kind": "vqa", "probs": {"Yes": 0.8, "No": 0.2}})
    path.write_text(json.dumps({"rules": rules, "default": "[]"}, indent=1))
    return path
