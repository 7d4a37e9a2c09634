"""Axis-aligned boxes, IoU, and conversions between pixel and per-mille coordinates.

Boxes always store semantic corners ``(x1, y1, x2, y2)``. The corner order of a
:class:`CoordinateSpace` only matters when reading or writing raw 4-number
arrays, e.g. a model emitting ``[ymin, xmin, ymax, xmax]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

PER_MILLE_SCALE = 1000.0


class CoordinateSpaceError(ValueError):
    """Raised when boxes from incompatible coordinate spaces are combined."""


@dataclass(frozen=True)
class CoordinateSpace:
    kind: Literal["pixel", "per-mille"] = "pixel"
    width: float | None = None
    height: float | None = None
    order: Literal["xyxy", "yxyx"] = "xyxy"

    def __post_init__(self) -> None:
        if self.kind not in ("pixel", "per-mille"):
            raise ValueError(f"unknown coordinate kind {self.kind!r}")
        if self.order not in ("xyxy", "yxyx"):
            raise ValueError(f"unknown corner order {self.order!r}")
        if self.kind == "pixel":
            for dim in (self.width, self.height):
                if dim is not None and dim <= 0:
                    raise ValueError(f"pixel space needs positive dimensions, got {self.width}x{self.height}")

    @classmethod
    def pixel(cls, width: float, height: float, order: str = "xyxy") -> "CoordinateSpace":
        if width <= 0 or height <= 0:
            raise ValueError(f"pixel space needs positive dimensions, got {width}x{height}")
        return cls("pixel", float(width), float(height), order)  # type: ignore[arg-type]

    @classmethod
    def per_mille(cls, order: str = "xyxy") -> "CoordinateSpace":
        return cls("per-mille", None, None, order)  # type: ignore[arg-type]

    def compatible(self, other: "CoordinateSpace") -> bool:
        if self.kind != other.kind:
            return False
        if self.kind == "pixel" and None not in (self.width, other.width):
            return self.width == other.width and self.height == other.height
        return True

    def decode(self, values: Sequence[float]) -> "BoundingBox":
        """Read a raw 4-number array in this space's corner order."""
        if len(values) != 4:
            raise ValueError(f"a box needs 4 numbers, got {len(values)}")
        a, b, c, d = (float(v) for v in values)
        if self.order == "yxyx":
            a, b, c, d = b, a, d, c
        return BoundingBox(a, b, c, d, space=self).normalized()

    def encode(self, box: "BoundingBox", ndigits: int | None = None) -> list[float]:
        """Write a box as a raw array in this space's corner order.

        Per-mille output is always integral; ``ndigits`` optionally rounds pixel output.
        """
        vals = [box.x1, box.y1, box.x2, box.y2]
        if self.order == "yxyx":
            vals = [box.y1, box.x1, box.y2, box.x2]
        if self.kind == "per-mille":
            return [int(round(v)) for v in vals]
        if ndigits is not None:
            return [round(v, ndigits) for v in vals]
        return vals


PIXEL = CoordinateSpace()


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float
    space: CoordinateSpace = field(default=PIXEL, compare=False)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float, space: CoordinateSpace = PIXEL) -> "BoundingBox":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h), space)

    @property
    def width(self) -> float:
        return max(0.0, self.x2 - self.x1)

    @property
    def height(self) -> float:
        return max(0.0, self.y2 - self.y1)

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def normalized(self) -> "BoundingBox":
        """Swap corners so that x2 >= x1 and y2 >= y1."""
        x1, x2 = sorted((self.x1, self.x2))
        y1, y2 = sorted((self.y1, self.y2))
        return BoundingBox(x1, y1, x2, y2, self.space)

    def clamp(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
            self.space,
        )

    def sort_key(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 when the union is empty."""
    if not a.space.compatible(b.space):
        raise CoordinateSpaceError(f"cannot compare boxes in {a.space} and {b.space}")
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def _pixel_dims(space: CoordinateSpace) -> tuple[float, float]:
    if space.width is None or space.height is None:
        raise ValueError("pixel space without image dimensions cannot be rescaled")
    if space.width <= 0 or space.height <= 0:
        raise ValueError(f"non-positive image dimensions {space.width}x{space.height}")
    return space.width, space.height


def convert(box: BoundingBox, src: CoordinateSpace, dst: CoordinateSpace) -> BoundingBox:
    """Rescale a box from ``src`` to ``dst``; corner order is a serialization concern."""
    sx = sy = 1.0
    if src.kind == "pixel":
        w, h = _pixel_dims(src)
        sx, sy = PER_MILLE_SCALE / w, PER_MILLE_SCALE / h
    # now in per-mille units
    if dst.kind == "pixel":
        w, h = _pixel_dims(dst)
        sx, sy = sx * w / PER_MILLE_SCALE, sy * h / PER_MILLE_SCALE
    if src.kind == "pixel" and dst.kind == "pixel" and (src.width, src.height) == (dst.width, dst.height):
        sx = sy = 1.0
    return BoundingBox(box.x1 * sx, box.y1 * sy, box.x2 * sx, box.y2 * sy, dst).normalized()


def convert_values(values: Sequence[float], src: CoordinateSpace, dst: CoordinateSpace) -> list[float]:
    """Raw-array variant of :func:`convert` that also applies corner reordering."""
    return dst.encode(convert(src.decode(values), src, dst))
