"""Raw saliency map -> ranked region proposals.

Stages, in order: Gaussian smoothing, elbow-method binarization of the
smoothed map, connected-component extraction on the token grid, component
weighting by the *original* (unsmoothed) saliency, top-K selection, and
mapping of token bounding boxes back to pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import (
    BinaryMask,
    Component,
    RegionProposal,
    SaliencyGrid,
    token_bbox_to_pixels,
)


class DegenerateMapError(Exception):
    """The saliency map is flat within tolerance; no threshold exists."""


@dataclass(frozen=True)
class PipelineConfig:
    sigma: float = 1.0
    connectivity: int = 8
    top_k: int = 2
    min_component_tokens: int = 1
    flat_epsilon: float = 1e-9

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")

    def to_record(self) -> dict:
        return {
            "sigma": self.sigma,
            "connectivity": self.connectivity,
            "top_k": self.top_k,
            "min_component_tokens": self.min_component_tokens,
            "flat_epsilon": self.flat_epsilon,
        }


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian of radius ceil(3 sigma), normalized to sum 1."""
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def _reflect_pad_1d(arr: np.ndarray, radius: int, axis: int) -> np.ndarray:
    # Symmetric reflection with edge duplication: [a b c] -> [b a | a b c | c b].
    return np.pad(arr, [(radius, radius) if ax == axis else (0, 0) for ax in range(arr.ndim)], mode="symmetric")


def _convolve_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = (kernel.size - 1) // 2
    padded = _reflect_pad_1d(arr, radius, axis)
    out = np.zeros_like(arr)
    for k, w in enumerate(kernel):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(k, k + arr.shape[axis])
        out += w * padded[tuple(sl)]
    return out


def gaussian_smooth(saliency: SaliencyGrid, sigma: float) -> SaliencyGrid:
    """Separable Gaussian filter with reflect padding at the grid borders."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    kernel = gaussian_kernel_1d(sigma)
    mat = saliency.as_matrix()
    mat = _convolve_axis(mat, kernel, axis=0)
    mat = _convolve_axis(mat, kernel, axis=1)
    # Rounding can push an exact zero a hair negative; scores stay >= 0.
    mat = np.maximum(mat, 0.0)
    return SaliencyGrid(grid=saliency.grid, scores=mat.ravel(), smoothed=True)


def elbow_threshold(values: Sequence[float], flat_epsilon: float = 1e-9) -> float:
    """Threshold at the sorted-value point farthest from the min-max chord.

    Values are sorted descending and both axes are normalized to [0, 1]
    before perpendicular distances are taken, which makes the choice
    invariant under positive scaling of the values.  Ties go to the
    smallest index (the higher-value side).
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.size < 2:
        raise ValueError("need at least 2 values to place a threshold")
    lo = float(vals.min())
    hi = float(vals.max())
    if hi - lo < flat_epsilon:
        raise DegenerateMapError(f"map is flat within {flat_epsilon}")
    sorted_desc = np.sort(vals)[::-1]
    x = np.linspace(0.0, 1.0, vals.size)
    y = (sorted_desc - lo) / (hi - lo)
    # Chord runs from (0, 1) to (1, 0); |x + y - 1| / sqrt(2) is the
    # perpendicular distance of each point to it.
    dist = np.abs(x + y - 1.0)
    elbow = int(np.argmax(dist))
    return float(sorted_desc[elbow])


def binarize(saliency: SaliencyGrid, threshold: float) -> BinaryMask:
    """Token i is active iff its (smoothed) score is >= threshold."""
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    return BinaryMask(
        grid=saliency.grid,
        bits=saliency.scores >= threshold,
        threshold_used=float(threshold),
    )


_NEIGHBORS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_NEIGHBORS_8 = _NEIGHBORS_4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


def connected_components(mask: BinaryMask, connectivity: int = 8) -> list[Component]:
    """Maximal connected sets of active tokens, ordered by (row_min, col_min)."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    offsets = _NEIGHBORS_4 if connectivity == 4 else _NEIGHBORS_8
    rows, cols = mask.grid.rows, mask.grid.cols
    bits = mask.as_matrix()
    seen = np.zeros_like(bits)
    components: list[Component] = []
    for r0 in range(rows):
        for c0 in range(cols):
            if not bits[r0, c0] or seen[r0, c0]:
                continue
            stack = [(r0, c0)]
            seen[r0, c0] = True
            member_rows: list[int] = []
            member_cols: list[int] = []
            while stack:
                r, c = stack.pop()
                member_rows.append(r)
                member_cols.append(c)
                for dr, dc in offsets:
                    nr, nc = r + dr, c + dc
                    if 0 <= nr < rows and 0 <= nc < cols and bits[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        stack.append((nr, nc))
            indices = frozenset(r * cols + c for r, c in zip(member_rows, member_cols))
            bbox = (min(member_rows), min(member_cols), max(member_rows), max(member_cols))
            components.append(Component(token_indices=indices, token_bbox=bbox))
    components.sort(key=lambda comp: (comp.token_bbox[0], comp.token_bbox[1]))
    return components


def score_and_rank(
    components: Sequence[Component],
    original: SaliencyGrid,
    top_k: int,
    min_component_tokens: int = 1,
) -> list[Component]:
    """Weight components by summed original saliency and keep the heaviest.

    Sort is descending by weight; ties prefer the larger component, then
    the smaller (row_min, col_min). Components below the minimum token
    count are dropped before truncation.
    """
    scored = [
        replace(comp, weight=float(sum(original.scores[i] for i in sorted(comp.token_indices))))
        for comp in components
        if comp.size >= min_component_tokens
    ]
    scored.sort(key=lambda c: (-c.weight, -c.size, c.token_bbox[0], c.token_bbox[1]))
    return scored[:top_k]


@dataclass(frozen=True)
class ExtractionResult:
    """Proposals plus the intermediate artifacts the refinement trace records."""

    proposals: tuple[RegionProposal, ...]
    degenerate: bool
    smoothed: SaliencyGrid | None
    mask: BinaryMask | None
    components: tuple[Component, ...]  # all scored components, pre-truncation


def extract_regions(
    saliency: SaliencyGrid,
    config: PipelineConfig,
    source_view: str = "global",
    iteration: int = 0,
) -> ExtractionResult:
    """Full single-map pipeline: smooth, threshold, label, rank, box."""
    smoothed = gaussian_smooth(saliency, config.sigma)
    try:
        tau = elbow_threshold(smoothed.scores, config.flat_epsilon)
    except DegenerateMapError:
        return ExtractionResult((), True, smoothed, None, ())
    mask = binarize(smoothed, tau)
    components = connected_components(mask, config.connectivity)
    all_scored = score_and_rank(
        components, saliency, top_k=len(components) or 1,
        min_component_tokens=config.min_component_tokens,
    )
    top = all_scored[: config.top_k]
    proposals = tuple(
        RegionProposal(
            component=comp,
            pixel_rect=token_bbox_to_pixels(comp.token_bbox, saliency.grid),
            score=comp.weight,
            source_view=source_view,
            iteration=iteration,
        )
        for comp in top
        if comp.weight > 0
    )
    return ExtractionResult(proposals, False, smoothed, mask, tuple(all_scored))
