"""Shared domain types: token grids, saliency maps, masks, components, views.

Conventions used by every stage:

* Token indices are row-major: token ``i`` lives at ``(i // cols, i % cols)``.
* Pixel rectangles are half-open ``[x, x+w) x [y, y+h)`` in original-image
  coordinates, so crops and IoU have no off-by-one ambiguity.
* Per-token pixel extents are derived from ``view_rect`` and the grid
  dimensions (integer partition), never from ``patch_px`` alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class PixelRect:
    """Half-open axis-aligned rectangle in pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.w < 0 or self.h < 0:
            raise ValueError(f"rectangle has negative extent: {self}")

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    def contains(self, other: "PixelRect") -> bool:
        return (
            self.x <= other.x
            and self.y <= other.y
            and other.x2 <= self.x2
            and other.y2 <= self.y2
        )

    def intersect(self, other: "PixelRect") -> "PixelRect":
        x1 = max(self.x, other.x)
        y1 = max(self.y, other.y)
        x2 = min(self.x2, other.x2)
        y2 = min(self.y2, other.y2)
        if x2 <= x1 or y2 <= y1:
            return PixelRect(x1, y1, 0, 0)
        return PixelRect(x1, y1, x2 - x1, y2 - y1)

    def to_record(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}


@dataclass(frozen=True)
class TokenGrid:
    """A rows x cols token grid covering ``view_rect`` of the original image."""

    rows: int
    cols: int
    patch_px: int
    view_rect: PixelRect

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.patch_px < 1:
            raise ValueError("patch_px must be >= 1")
        if self.view_rect.w < self.cols or self.view_rect.h < self.rows:
            raise ValueError(
                f"view_rect {self.view_rect} too small for {self.rows}x{self.cols} grid"
            )

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def flat_index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def row_col(self, index: int) -> tuple[int, int]:
        return divmod(index, self.cols)

    def col_bounds(self, col: int) -> tuple[int, int]:
        """Half-open x-extent of a token column, in original-image pixels."""
        w = self.view_rect.w
        return (
            self.view_rect.x + (col * w) // self.cols,
            self.view_rect.x + ((col + 1) * w) // self.cols,
        )

    def row_bounds(self, row: int) -> tuple[int, int]:
        h = self.view_rect.h
        return (
            self.view_rect.y + (row * h) // self.rows,
            self.view_rect.y + ((row + 1) * h) // self.rows,
        )

    def token_rect(self, index: int) -> PixelRect:
        """Pixel footprint of one token, in original-image coordinates."""
        r, c = self.row_col(index)
        x1, x2 = self.col_bounds(c)
        y1, y2 = self.row_bounds(r)
        return PixelRect(x1, y1, x2 - x1, y2 - y1)


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class SaliencyGrid:
    """Per-token non-negative scores aligned to a TokenGrid.

    ``smoothed`` records provenance: raw gradient-norm scores carry False,
    the Gaussian-filtered map carries True.
    """

    grid: TokenGrid
    scores: np.ndarray
    smoothed: bool = False

    def __post_init__(self) -> None:
        scores = _readonly(np.asarray(self.scores, dtype=np.float64))
        object.__setattr__(self, "scores", scores)
        if scores.shape != (self.grid.size,):
            raise ValueError(
                f"expected {self.grid.size} scores, got shape {scores.shape}"
            )
        if not np.all(np.isfinite(scores)) or np.any(scores < 0):
            raise ValueError("saliency scores must be finite and non-negative")

    def as_matrix(self) -> np.ndarray:
        return self.scores.reshape(self.grid.rows, self.grid.cols)


@dataclass(frozen=True)
class BinaryMask:
    """Thresholded saliency support on a token grid."""

    grid: TokenGrid
    bits: np.ndarray
    threshold_used: float

    def __post_init__(self) -> None:
        bits = _readonly(np.asarray(self.bits, dtype=bool))
        object.__setattr__(self, "bits", bits)
        if bits.shape != (self.grid.size,):
            raise ValueError(f"expected {self.grid.size} bits, got shape {bits.shape}")

    def as_matrix(self) -> np.ndarray:
        return self.bits.reshape(self.grid.rows, self.grid.cols)

    @property
    def active_count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class Component:
    """A connected set of mask tokens.

    ``weight`` is None until scored; once set it is the sum of the
    original (unsmoothed) saliency over ``token_indices``.
    """

    token_indices: frozenset[int]
    token_bbox: tuple[int, int, int, int]  # (row_min, col_min, row_max, col_max), inclusive
    weight: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.token_indices:
            raise ValueError("component must contain at least one token")

    @property
    def size(self) -> int:
        return len(self.token_indices)


@dataclass(frozen=True)
class RegionProposal:
    """A ranked evidence region mapped back to original-image pixels."""

    component: Component
    pixel_rect: PixelRect
    score: float
    source_view: str
    iteration: int

    def __post_init__(self) -> None:
        if self.score <= 0:
            raise ValueError("proposal score must be positive")

    def to_record(self) -> dict:
        return {
            "kind": "region",
            "pixel_rect": self.pixel_rect.to_record(),
            "score": self.score,
            "source_view": self.source_view,
            "iteration": self.iteration,
            "token_bbox": list(self.component.token_bbox),
            "token_count": self.component.size,
        }


@dataclass(frozen=True)
class View:
    """One image the loop looks at: the global image or a crop of it."""

    id: str
    pixel_rect: PixelRect
    parent: Optional[str] = None
    is_global: bool = False
    depth: int = 0


@dataclass(frozen=True)
class ViewSet:
    """Ordered views: the global view first, then crops by descending score."""

    views: tuple[View, ...]

    def __post_init__(self) -> None:
        if not self.views:
            raise ValueError("view set cannot be empty")
        globals_ = [v for v in self.views if v.is_global]
        if len(globals_) != 1 or not self.views[0].is_global:
            raise ValueError("exactly one global view is required, ordered first")
        if self.views[0].depth != 0:
            raise ValueError("global view must have depth 0")
        full = self.views[0].pixel_rect
        for v in self.views[1:]:
            if not full.contains(v.pixel_rect):
                raise ValueError(f"view {v.id} escapes the global image bounds")

    def __iter__(self):
        return iter(self.views)

    def __len__(self) -> int:
        return len(self.views)

    @property
    def global_view(self) -> View:
        return self.views[0]


def token_bbox_to_pixels(
    bbox: tuple[int, int, int, int], grid: TokenGrid
) -> PixelRect:
    """Map an inclusive token bbox to its pixel rect in original coordinates.

    Token extents come from the same integer partition of ``view_rect``
    used everywhere else, so the result is automatically clamped to the
    view and consistent with patch embedding.
    """
    row_min, col_min, row_max, col_max = bbox
    if not (0 <= row_min <= row_max < grid.rows and 0 <= col_min <= col_max < grid.cols):
        raise ValueError(f"token bbox {bbox} out of bounds for {grid.rows}x{grid.cols} grid")
    x1, _ = grid.col_bounds(col_min)
    _, x2 = grid.col_bounds(col_max)
    y1, _ = grid.row_bounds(row_min)
    _, y2 = grid.row_bounds(row_max)
    return PixelRect(x1, y1, x2 - x1, y2 - y1)


def compose_rect(child: PixelRect, parent: View) -> PixelRect:
    """Lift a rect given in parent-local pixels to original-image coordinates."""
    if child.x < 0 or child.y < 0 or child.x2 > parent.pixel_rect.w or child.y2 > parent.pixel_rect.h:
        raise ValueError(f"child rect {child} escapes parent view {parent.id}")
    return PixelRect(
        parent.pixel_rect.x + child.x,
        parent.pixel_rect.y + child.y,
        child.w,
        child.h,
    )


def rect_iou(a: PixelRect, b: PixelRect) -> float:
    """Intersection-over-union of two pixel rects; degenerate inputs give 0."""
    if a.area == 0 or b.area == 0:
        return 0.0
    inter = a.intersect(b).area
    union = a.area + b.area - inter
    return inter / union


def expand_rect(
    rect: PixelRect, min_side: int, bounds: PixelRect
) -> PixelRect:
    """Grow ``rect`` to at least ``min_side`` per side, kept inside ``bounds``.

    Growth is centered; if the grown rect sticks out of ``bounds`` it is
    shifted back inside, and capped at the bounds size when bounds itself
    is smaller than ``min_side``.
    """
    w = min(max(rect.w, min_side), bounds.w)
    h = min(max(rect.h, min_side), bounds.h)
    x = rect.x - (w - rect.w) // 2
    y = rect.y - (h - rect.h) // 2
    x = min(max(x, bounds.x), bounds.x2 - w)
    y = min(max(y, bounds.y), bounds.y2 - h)
    return PixelRect(x, y, w, h)
