"""Draw colored box outlines onto images for visual prompts."""

from __future__ import annotations

import io
from typing import Iterable, Literal

import numpy as np
from PIL import Image, UnidentifiedImageError

from .geometry import BoundingBox

Color = Literal["green", "red", "blue"]

COLORS: dict[str, tuple[int, int, int]] = {
    "green": (0, 255, 0),
    "red": (255, 0, 0),
    "blue": (0, 0, 255),
}


class ImageDecodeError(ValueError):
    pass


def decode(payload: bytes) -> Image.Image:
    try:
        img = Image.open(io.BytesIO(payload))
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"unreadable image bytes: {exc}") from exc
    return img.convert("RGB")


def stroke_width(width: int, height: int) -> int:
    return max(2, round(0.004 * max(width, height)))


def pixel_extent(box: BoundingBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Inclusive pixel rectangle covered by a continuous box, clipped to the image."""
    left = min(max(int(round(box.x1)), 0), width - 1)
    top = min(max(int(round(box.y1)), 0), height - 1)
    right = min(max(int(round(box.x2)) - 1, left), width - 1)
    bottom = min(max(int(round(box.y2)) - 1, top), height - 1)
    return left, top, right, bottom


def draw_on_array(pixels: np.ndarray, boxes: Iterable[tuple[BoundingBox, str]], width: int | None = None) -> np.ndarray:
    """Paint outlines into an HxWx3 uint8 array (copy). Strokes grow inward."""
    out = pixels.copy()
    h, w = out.shape[:2]
    sw = width if width is not None else stroke_width(w, h)
    for box, color in boxes:
        rgb = COLORS[color]
        left, top, right, bottom = pixel_extent(box, w, h)
        out[top : min(top + sw, bottom + 1), left : right + 1] = rgb
        out[max(bottom - sw + 1, top) : bottom + 1, left : right + 1] = rgb
        out[top : bottom + 1, left : min(left + sw, right + 1)] = rgb
        out[top : bottom + 1, max(right - sw + 1, left) : right + 1] = rgb
    return out


def draw_boxes(
    payload: bytes,
    boxes: Iterable[tuple[BoundingBox, str]],
    width: int | None = None,
    fmt: str = "PNG",
    quality: int = 90,
    max_side: int | None = None,
) -> bytes:
    """Return re-encoded image bytes with box outlines drawn.

    ``max_side`` downsizes after drawing so that strokes keep their relative weight.
    """
    img = decode(payload)
    arr = draw_on_array(np.asarray(img), list(boxes), width)
    out = Image.fromarray(arr, "RGB")
    if max_side and max(out.size) > max_side:
        out = out.resize(scaled_size(out.width, out.height, max_side), Image.Resampling.BICUBIC)
    buf = io.BytesIO()
    if fmt.upper() in ("JPEG", "JPG"):
        out.save(buf, format="JPEG", quality=quality)
    else:
        out.save(buf, format=fmt)
    return buf.getvalue()


def scaled_size(width: int, height: int, max_side: int | None) -> tuple[int, int]:
    if not max_side or max(width, height) <= max_side:
        return width, height
    s = max_side / max(width, height)
    return max(1, round(width * s)), max(1, round(height * s))
