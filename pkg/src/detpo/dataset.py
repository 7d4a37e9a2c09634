"""COCO-format ingestion, class metadata, splits, and K-shot subsampling."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .geometry import BoundingBox


class DatasetError(ValueError):
    """Malformed or inconsistent annotation data."""


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    file_name: str
    width: int
    height: int
    root: str | None = None
    payload: bytes | None = field(default=None, repr=False, compare=False)

    @property
    def path(self) -> Path:
        return Path(self.root or ".") / self.file_name

    def read_bytes(self) -> bytes:
        if self.payload is not None:
            return self.payload
        try:
            return self.path.read_bytes()
        except OSError as exc:
            raise DatasetError(f"unreadable image {self.path}: {exc}") from exc


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: int
    class_id: int
    box: BoundingBox
    annotation_id: int | None = None


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    description: str = ""
    instructions: str = ""
    category_id: int | None = None

    @property
    def coco_id(self) -> int:
        return self.category_id if self.category_id is not None else self.class_id

    def seed_prompt(self) -> str:
        """The dataset-provided definition, used as the starting candidate."""
        parts = [p.strip() for p in (self.description, self.instructions) if p and p.strip()]
        return "\n\n".join(parts) if parts else self.name


@dataclass(frozen=True)
class DatasetSplit:
    role: str
    images: tuple[ImageRecord, ...]
    ground_truths: tuple[GroundTruthBox, ...]
    classes: tuple[ClassSpec, ...]

    def __post_init__(self) -> None:
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"duplicate image ids in {self.role} split")
        known = set(ids)
        n_classes = len(self.classes)
        for gt in self.ground_truths:
            if gt.image_id not in known:
                raise DatasetError(f"annotation references unknown image id {gt.image_id}")
            if not 0 <= gt.class_id < n_classes:
                raise DatasetError(f"annotation references unknown class id {gt.class_id}")

    @cached_property
    def image_index(self) -> dict[int, ImageRecord]:
        return {im.image_id: im for im in self.images}

    @cached_property
    def gt_by_image(self) -> dict[int, list[GroundTruthBox]]:
        out: dict[int, list[GroundTruthBox]] = {im.image_id: [] for im in self.images}
        for gt in self.ground_truths:
            out[gt.image_id].append(gt)
        return out

    @cached_property
    def gt_by_class(self) -> dict[int, list[GroundTruthBox]]:
        out: dict[int, list[GroundTruthBox]] = {c.class_id: [] for c in self.classes}
        for gt in self.ground_truths:
            out[gt.class_id].append(gt)
        return out

    def images_with_class(self, class_id: int) -> list[ImageRecord]:
        ids = {gt.image_id for gt in self.gt_by_class.get(class_id, [])}
        return [im for im in self.images if im.image_id in ids]

    def class_by_name(self, name: str) -> ClassSpec:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def class_by_category(self, category_id: int) -> ClassSpec:
        for c in self.classes:
            if c.coco_id == category_id:
                return c
        raise KeyError(category_id)

    def with_role(self, role: str) -> "DatasetSplit":
        return DatasetSplit(role, self.images, self.ground_truths, self.classes)


def load_metadata(path: str | Path) -> dict[str, dict[str, str]]:
    """Sidecar JSON: ``{class name: {"description": ..., "instructions": ...}}``."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise DatasetError("metadata sidecar must be a JSON object keyed by class name")
    out: dict[str, dict[str, str]] = {}
    for name, entry in raw.items():
        if isinstance(entry, str):
            entry = {"description": entry}
        if not isinstance(entry, dict):
            raise DatasetError(f"metadata for {name!r} must be an object")
        out[str(name)] = {
            "description": str(entry.get("description", "") or ""),
            "instructions": str(entry.get("instructions", "") or ""),
        }
    return out


def _bbox(raw: Any, ann_id: Any) -> tuple[float, float, float, float]:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise DatasetError(f"annotation {ann_id}: malformed bbox {raw!r}")
    try:
        x, y, w, h = (float(v) for v in raw)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"annotation {ann_id}: malformed bbox {raw!r}") from exc
    if w < 0 or h < 0:
        raise DatasetError(f"annotation {ann_id}: negative bbox size {raw!r}")
    return x, y, w, h


def parse_coco(
    data: Mapping[str, Any],
    image_root: str | Path | None = None,
    metadata: Mapping[str, Mapping[str, str]] | None = None,
    role: str = "train",
) -> DatasetSplit:
    """Build a split from an already-parsed COCO dictionary."""
    for key in ("images", "annotations", "categories"):
        if key not in data:
            raise DatasetError(f"COCO file lacks {key!r}")
    metadata = metadata or {}
    cats = sorted(data["categories"], key=lambda c: c["id"])
    classes = []
    cat_to_class: dict[int, int] = {}
    for idx, cat in enumerate(cats):
        name = str(cat["name"]).strip()
        if not name:
            raise DatasetError(f"category {cat['id']} has an empty name")
        meta = metadata.get(name, {})
        classes.append(ClassSpec(idx, name, meta.get("description", ""), meta.get("instructions", ""), int(cat["id"])))
        cat_to_class[int(cat["id"])] = idx

    root = str(image_root) if image_root is not None else None
    images = []
    for im in data["images"]:
        w, h = int(im["width"]), int(im["height"])
        if w <= 0 or h <= 0:
            raise DatasetError(f"image {im['id']} has non-positive size {w}x{h}")
        images.append(ImageRecord(int(im["id"]), str(im["file_name"]), w, h, root))
    sizes = {im.image_id: (im.width, im.height) for im in images}

    gts = []
    for ann in data["annotations"]:
        ann_id = ann.get("id")
        cat_id = int(ann["category_id"])
        if cat_id not in cat_to_class:
            raise DatasetError(f"annotation {ann_id} references unknown category id {cat_id}")
        img_id = int(ann["image_id"])
        if img_id not in sizes:
            raise DatasetError(f"annotation {ann_id} references unknown image id {img_id}")
        w, h = sizes[img_id]
        box = BoundingBox.from_xywh(*_bbox(ann.get("bbox"), ann_id)).clamp(w, h)
        gts.append(GroundTruthBox(img_id, cat_to_class[cat_id], box, ann_id))
    return DatasetSplit(role, tuple(images), tuple(gts), tuple(classes))


def load_coco(
    annotation_file: str | Path,
    image_root: str | Path | None = None,
    metadata: str | Path | Mapping[str, Mapping[str, str]] | None = None,
    role: str = "train",
) -> DatasetSplit:
    """Load a COCO annotation file. Images default to living beside the JSON file."""
    annotation_file = Path(annotation_file)
    try:
        data = json.loads(annotation_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{annotation_file} is not valid JSON: {exc}") from exc
    if isinstance(metadata, (str, Path)):
        metadata = load_metadata(metadata)
    root = image_root if image_root is not None else annotation_file.parent
    return parse_coco(data, root, metadata, role)


# Roboflow exports keep one annotation file per split directory.
_SPLIT_DIRS = {"train": ("train",), "val": ("valid", "val"), "test": ("test",)}


def locate_split(dataset: str | Path, split: str) -> Path:
    """Resolve ``dataset`` (a COCO file or an export directory) to an annotation file."""
    dataset = Path(dataset)
    if dataset.is_file():
        return dataset
    for name in _SPLIT_DIRS.get(split, (split,)):
        for candidate in (dataset / name / "_annotations.coco.json", dataset / f"{name}.json"):
            if candidate.is_file():
                return candidate
    raise DatasetError(f"no {split!r} annotations found under {dataset}")


def subsample_k_shot(split: DatasetSplit, k: int, seed: int = 0) -> DatasetSplit:
    """Keep at most ``k`` images containing each class.

    Images are visited per class in a seeded shuffle and admitted only while no
    class they contain would exceed ``k``. Images without annotations are kept.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = random.Random(seed)
    classes_in = {im.image_id: {gt.class_id for gt in split.gt_by_image[im.image_id]} for im in split.images}
    counts = {c.class_id: 0 for c in split.classes}
    keep = {iid for iid, cs in classes_in.items() if not cs}
    for spec in split.classes:
        pool = sorted(im.image_id for im in split.images_with_class(spec.class_id))
        rng.shuffle(pool)
        for iid in pool:
            if counts[spec.class_id] >= k:
                break
            if iid in keep:
                continue
            if any(counts[c] >= k for c in classes_in[iid]):
                continue
            keep.add(iid)
            for c in classes_in[iid]:
                counts[c] += 1
    images = tuple(im for im in split.images if im.image_id in keep)
    gts = tuple(gt for gt in split.ground_truths if gt.image_id in keep)
    return DatasetSplit(split.role, images, gts, split.classes)


def restrict_images(split: DatasetSplit, image_ids: Iterable[int], role: str | None = None) -> DatasetSplit:
    ids = set(image_ids)
    return DatasetSplit(
        role or split.role,
        tuple(im for im in split.images if im.image_id in ids),
        tuple(gt for gt in split.ground_truths if gt.image_id in ids),
        split.classes,
    )


def to_coco(split: DatasetSplit) -> dict[str, Any]:
    """Inverse of :func:`parse_coco` (pixel xywh boxes)."""
    return {
        "images": [{"id": im.image_id, "file_name": im.file_name, "width": im.width, "height": im.height} for im in split.images],
        "annotations": [
            {
                "id": gt.annotation_id if gt.annotation_id is not None else i,
                "image_id": gt.image_id,
                "category_id": split.classes[gt.class_id].coco_id,
                "bbox": [gt.box.x1, gt.box.y1, gt.box.width, gt.box.height],
            }
            for i, gt in enumerate(split.ground_truths)
        ],
        "categories": [{"id": c.coco_id, "name": c.name} for c in split.classes],
    }


def check_disjoint(splits: Sequence[DatasetSplit]) -> None:
    seen: dict[int, str] = {}
    for s in splits:
        for im in s.images:
            if im.image_id in seen and seen[im.image_id] != s.role:
                raise DatasetError(f"image {im.image_id} appears in both {seen[im.image_id]} and {s.role}")
            seen[im.image_id] = s.role
