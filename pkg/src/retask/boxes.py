"""Normalized axis-aligned rectangles in [0,1]^4."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(f"invalid box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_pixels(self, dim: int) -> tuple[int, int, int, int]:
        """Pixel extents (x1, y1, x2, y2), end-exclusive, clipped to the page."""
        px1 = max(0, min(dim, round(self.x1 * dim)))
        py1 = max(0, min(dim, round(self.y1 * dim)))
        px2 = max(px1, min(dim, round(self.x2 * dim)))
        py2 = max(py1, min(dim, round(self.y2 * dim)))
        return px1, py1, px2, py2


def merge_boxes(boxes) -> BoundingBox:
    """Minimum bounding rectangle covering every box."""
    boxes = list(boxes)
    if not boxes:
        raise ValueError("merge_boxes needs at least one box")
    return BoundingBox(
        min(b.x1 for b in boxes),
        min(b.y1 for b in boxes),
        max(b.x2 for b in boxes),
        max(b.y2 for b in boxes),
    )


def from_pixels(px1: int, py1: int, px2: int, py2: int, dim: int) -> BoundingBox:
    return BoundingBox(px1 / dim, py1 / dim, px2 / dim, py2 / dim)
