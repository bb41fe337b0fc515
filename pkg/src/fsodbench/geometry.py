"""Axis-aligned box arithmetic in corner form ``(x_min, y_min, x_max, y_max)``.

Coordinates are real-valued pixels with the origin at the top-left corner.
No ``+1`` pixel-grid conventions are applied anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

DEFAULT_CROP_MARGIN = 0.1


class InvalidBoxError(ValueError):
    """Raised for degenerate or non-finite boxes."""


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not math.isfinite(v):
                raise InvalidBoxError(f"non-finite coordinate in {self.as_list()}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBoxError(f"degenerate box {self.as_list()}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    @classmethod
    def from_list(cls, coords: Sequence[float]) -> "BBox":
        if len(coords) != 4:
            raise InvalidBoxError(f"expected 4 coordinates, got {len(coords)}")
        return cls(*(float(c) for c in coords))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def as_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    def contains(self, other: "BBox") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and self.x_max >= other.x_max
            and self.y_max >= other.y_max
        )


@dataclass(frozen=True)
class ImageDims:
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dims must be positive, got {self.width}x{self.height}")


def area(b: BBox) -> float:
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two valid boxes; 0.0 when they do not overlap."""
    if a == b:
        return 1.0
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = area(a) + area(b) - inter
    return min(1.0, inter / union)


def iou_matrix(a: Sequence[BBox], b: Sequence[BBox]) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``.

    Exactly-equal boxes get 1.0, matching :func:`iou`.
    """
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    A = np.array([x.as_list() for x in a], dtype=float)
    B = np.array([x.as_list() for x in b], dtype=float)
    lt = np.maximum(A[:, None, :2], B[None, :, :2])
    rb = np.minimum(A[:, None, 2:], B[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.minimum(inter / union, 1.0)
    same = np.all(A[:, None, :] == B[None, :, :], axis=-1)
    out[same] = 1.0
    return out


def clip(b: BBox, dims: ImageDims) -> Optional[BBox]:
    """Intersect ``b`` with the image frame. Returns None when nothing is left."""
    x0 = min(max(b.x_min, 0.0), float(dims.width))
    y0 = min(max(b.y_min, 0.0), float(dims.height))
    x1 = min(max(b.x_max, 0.0), float(dims.width))
    y1 = min(max(b.y_max, 0.0), float(dims.height))
    if x1 <= x0 or y1 <= y0:
        return None
    if (x0, y0, x1, y1) == (b.x_min, b.y_min, b.x_max, b.y_max):
        return b
    return BBox(x0, y0, x1, y1)


def crop_region(b: BBox, dims: ImageDims, margin: float = DEFAULT_CROP_MARGIN) -> BBox:
    """Pad ``b`` by ``margin * max(width, height)`` on every edge, then clip.

    Raises InvalidBoxError if the box does not intersect the image.
    """
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    pad = margin * max(b.width, b.height)
    grown = BBox(b.x_min - pad, b.y_min - pad, b.x_max + pad, b.y_max + pad)
    out = clip(grown, dims)
    if out is None:
        raise InvalidBoxError(f"box {b.as_list()} lies outside the {dims.width}x{dims.height} image")
    return out


def dedupe(boxes: Iterable[BBox], iou_threshold: float = 0.95) -> list[BBox]:
    """Keep boxes in order, dropping any whose IoU with a kept box exceeds the threshold."""
    kept: list[BBox] = []
    for b in boxes:
        if all(iou(b, k) <= iou_threshold for k in kept):
            kept.append(b)
    return kept
