"""Iterative zoom-and-reground controller with spatial-entropy stopping.

Each iteration grounds every current view, pools all components across
views, selects the top-K by accumulated original saliency, and measures
the spatial entropy of the mask in the view holding the best component.
Refinement continues while that entropy strictly decreases; the first
non-decrease stops the loop and the pre-expansion view set is returned.
Ablation policies: ``confidence_drop`` stops on the first strict drop of
the best view's next-token max probability, ``fixed:N`` runs exactly N
ground/extract passes with no adaptive check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .backends import GradientBackend, ViewPixels
from .core import (
    BinaryMask,
    PixelRect,
    RegionProposal,
    View,
    ViewSet,
    expand_rect,
    rect_iou,
    token_bbox_to_pixels,
)
from .imaging import RasterImage, crop
from .objectives import ObjectiveConfig
from .pipeline import ExtractionResult, PipelineConfig, connected_components, extract_regions

SPATIAL_ENTROPY = "spatial_entropy"
CONFIDENCE_DROP = "confidence_drop"


def parse_stopping(policy: str) -> tuple[str, Optional[int]]:
    """Validate a stopping policy string; returns (kind, fixed_count)."""
    if policy in (SPATIAL_ENTROPY, CONFIDENCE_DROP):
        return policy, None
    if policy.startswith("fixed:"):
        n = int(policy.split(":", 1)[1])
        if n < 1:
            raise ValueError("fixed iteration budget must be >= 1")
        return "fixed", n
    raise ValueError(f"unknown stopping policy {policy!r}")


@dataclass(frozen=True)
class RefineConfig:
    max_iters: int = 4
    top_k: int = 2
    stopping: str = SPATIAL_ENTROPY
    min_crop_px: int = 28
    dedupe_iou: float = 0.9
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not (0.0 < self.dedupe_iou <= 1.0):
            raise ValueError("dedupe_iou must be in (0, 1]")
        parse_stopping(self.stopping)

    def to_record(self) -> dict:
        return {
            "max_iters": self.max_iters,
            "top_k": self.top_k,
            "stopping": self.stopping,
            "min_crop_px": self.min_crop_px,
            "dedupe_iou": self.dedupe_iou,
            "objective": self.objective.to_record(),
        }


def spatial_entropy(mask: BinaryMask, connectivity: int = 8) -> float:
    """Shannon entropy of the component-size distribution of a mask.

    0 for a single blob (fully concentrated), ln m for m equal blobs,
    +inf for an empty mask (nothing to concentrate on, forces a stop).
    """
    components = connected_components(mask, connectivity)
    if not components:
        return math.inf
    sizes = [comp.size for comp in components]
    total = sum(sizes)
    return -sum((s / total) * math.log(s / total) for s in sizes)


def spatial_entropy_stop(h_prev: float, h_t: float) -> bool:
    """Stop as soon as spatial entropy fails to strictly decrease."""
    return h_t >= h_prev


def confidence_stop(prev_conf: float, cur_conf: float) -> bool:
    """Ablation policy: stop on the first strict confidence decrease."""
    if not (0.0 <= cur_conf <= 1.0):
        raise ValueError(f"confidence {cur_conf} outside [0, 1]")
    return cur_conf < prev_conf


@dataclass
class ViewRecord:
    """Everything observed for one view in one iteration."""

    view: View
    rows: int
    cols: int
    scores: tuple[float, ...]
    smoothed: tuple[float, ...] | None
    threshold: float | None
    mask_bits: tuple[int, ...] | None
    degenerate: bool
    entropy: float
    max_prob: float
    components: tuple[dict, ...]

    def to_record(self) -> dict:
        return {
            "view_id": self.view.id,
            "rect": self.view.pixel_rect.to_record(),
            "rows": self.rows,
            "cols": self.cols,
            "scores": list(self.scores),
            "smoothed": None if self.smoothed is None else list(self.smoothed),
            "threshold": self.threshold,
            "mask": None if self.mask_bits is None else list(self.mask_bits),
            "degenerate": self.degenerate,
            "entropy": self.entropy,
            "max_prob": self.max_prob,
            "components": list(self.components),
        }


@dataclass
class IterationRecord:
    iteration: int
    view_ids: tuple[str, ...]
    per_view: tuple[ViewRecord, ...]
    selected: tuple[RegionProposal, ...]
    most_important_view: Optional[str]
    h_prev: float
    h_t: Optional[float]
    confidence: Optional[float]
    decision: str

    def to_record(self) -> dict:
        return {
            "iteration": self.iteration,
            "views": list(self.view_ids),
            "per_view": [v.to_record() for v in self.per_view],
            "selected": [p.to_record() for p in self.selected],
            "most_important_view": self.most_important_view,
            "h_prev": None if math.isinf(self.h_prev) else self.h_prev,
            "h_t": None if self.h_t is None or math.isinf(self.h_t) else self.h_t,
            "confidence": self.confidence,
            "decision": self.decision,
        }


@dataclass
class RefinementTrace:
    """Append-only per-iteration audit log."""

    records: list[IterationRecord] = field(default_factory=list)

    def append(self, record: IterationRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_records(self) -> list[dict]:
        return [r.to_record() for r in self.records]

    def h_values(self) -> list[float]:
        return [r.h_t for r in self.records if r.h_t is not None]


@dataclass
class RefinementState:
    """Mutable loop state; ``h_prev`` starts at +inf before iteration 0."""

    iteration: int = 0
    view_pixels: list[ViewPixels] = field(default_factory=list)
    h_prev: float = math.inf
    prev_confidence: float = -math.inf
    trace: RefinementTrace = field(default_factory=RefinementTrace)


@dataclass(frozen=True)
class RefinementResult:
    views: ViewSet
    view_pixels: tuple[ViewPixels, ...]
    proposals: tuple[RegionProposal, ...]
    trace: RefinementTrace


class RefinementError(Exception):
    """Backend failure mid-loop; carries the partial trace for diagnosis."""

    def __init__(self, message: str, trace: RefinementTrace, cause: Exception):
        super().__init__(message)
        self.trace = trace
        self.cause = cause


def _view_record(
    view: View, ext: ExtractionResult, scores, summary
) -> ViewRecord:
    return ViewRecord(
        view=view,
        rows=scores.grid.rows,
        cols=scores.grid.cols,
        scores=tuple(float(s) for s in scores.scores),
        smoothed=None if ext.smoothed is None else tuple(float(s) for s in ext.smoothed.scores),
        threshold=None if ext.mask is None else ext.mask.threshold_used,
        mask_bits=None if ext.mask is None else tuple(int(b) for b in ext.mask.bits),
        degenerate=ext.degenerate,
        entropy=summary.entropy,
        max_prob=summary.max_prob,
        components=tuple(
            {
                "tokens": sorted(comp.token_indices),
                "weight": comp.weight,
                "bbox": list(comp.token_bbox),
            }
            for comp in ext.components
        ),
    )


def refine(
    image: RasterImage,
    prompt: str,
    backend: GradientBackend,
    pipeline_config: PipelineConfig,
    refine_config: RefineConfig,
) -> RefinementResult:
    """Run the full zoom-and-reground loop; see the module docstring."""
    policy, fixed_n = parse_stopping(refine_config.stopping)
    iterations = fixed_n if policy == "fixed" else refine_config.max_iters

    original_rect = image.rect
    global_view = View(id="global", pixel_rect=original_rect, is_global=True, depth=0)
    state = RefinementState(view_pixels=[(global_view, image)])
    proposals: tuple[RegionProposal, ...] = ()

    for t in range(iterations):
        state.iteration = t
        views = state.view_pixels
        try:
            grounded = backend.ground(views, prompt, refine_config.objective)
        except Exception as exc:
            raise RefinementError(
                f"backend failed at iteration {t}: {exc}", state.trace, exc
            ) from exc

        per_view: list[ViewRecord] = []
        pooled: list[RegionProposal] = []
        masks: dict[str, BinaryMask] = {}
        for (view, _), (saliency, summary) in zip(views, grounded):
            ext = extract_regions(
                saliency, pipeline_config, source_view=view.id, iteration=t
            )
            per_view.append(_view_record(view, ext, saliency, summary))
            if ext.mask is not None:
                masks[view.id] = ext.mask
            for comp in ext.components:
                if comp.weight > 0:
                    pooled.append(
                        RegionProposal(
                            component=comp,
                            pixel_rect=token_bbox_to_pixels(comp.token_bbox, saliency.grid),
                            score=comp.weight,
                            source_view=view.id,
                            iteration=t,
                        )
                    )

        pooled.sort(
            key=lambda p: (
                -p.score,
                -p.component.size,
                p.component.token_bbox[0],
                p.component.token_bbox[1],
                p.source_view,
            )
        )
        selected = tuple(pooled[: refine_config.top_k])

        if not selected:
            all_degenerate = all(v.degenerate for v in per_view)
            decision = "stop:degenerate_maps" if all_degenerate else "stop:empty_pool"
            state.trace.append(
                IterationRecord(
                    iteration=t,
                    view_ids=tuple(v.id for v, _ in views),
                    per_view=tuple(per_view),
                    selected=(),
                    most_important_view=None,
                    h_prev=state.h_prev,
                    h_t=None,
                    confidence=None,
                    decision=decision,
                )
            )
            break

        proposals = selected
        top = selected[0]
        summary_by_view = {
            view.id: summary for (view, _), (_, summary) in zip(views, grounded)
        }
        h_t = spatial_entropy(masks[top.source_view], pipeline_config.connectivity)
        confidence = summary_by_view[top.source_view].max_prob

        decision = "continue"
        if policy == SPATIAL_ENTROPY and spatial_entropy_stop(state.h_prev, h_t):
            decision = "stop:spatial_entropy"
        elif policy == CONFIDENCE_DROP and confidence_stop(state.prev_confidence, confidence):
            decision = "stop:confidence_drop"
        elif t == iterations - 1:
            decision = "stop:max_iters" if policy != "fixed" else "stop:fixed_budget"

        state.trace.append(
            IterationRecord(
                iteration=t,
                view_ids=tuple(v.id for v, _ in views),
                per_view=tuple(per_view),
                selected=selected,
                most_important_view=top.source_view,
                h_prev=state.h_prev,
                h_t=h_t,
                confidence=confidence,
                decision=decision,
            )
        )
        if decision.startswith("stop:spatial_entropy") or decision.startswith(
            "stop:confidence_drop"
        ):
            # Pre-expansion view set is the Algorithm's return value.
            break
        state.h_prev = h_t
        state.prev_confidence = confidence

        # Build the next view set: global context plus deduped crops.
        next_views: list[ViewPixels] = [(global_view, image)]
        for rank, prop in enumerate(selected):
            rect = expand_rect(prop.pixel_rect, refine_config.min_crop_px, original_rect)
            if any(
                rect_iou(rect, existing.pixel_rect) >= refine_config.dedupe_iou
                for existing, _ in next_views
            ):
                continue
            parent = next(v for v, _ in views if v.id == prop.source_view)
            child = View(
                id=f"it{t}.r{rank}",
                pixel_rect=rect,
                parent=parent.id,
                is_global=False,
                depth=parent.depth + 1,
            )
            next_views.append((child, crop(image, rect)))
        if decision != "continue":
            state.view_pixels = next_views
            break
        state.view_pixels = next_views

    view_set = ViewSet(views=tuple(v for v, _ in state.view_pixels))
    return RefinementResult(
        views=view_set,
        view_pixels=tuple(state.view_pixels),
        proposals=proposals,
        trace=state.trace,
    )


def answer_with_views(
    view_pixels: Sequence[ViewPixels], prompt: str, backend: GradientBackend
) -> str:
    """Final answer over the refined views, global context first."""
    if not view_pixels:
        raise ValueError("need at least one view")
    if not view_pixels[0][0].is_global:
        raise ValueError("global view must come first")
    return backend.answer(list(view_pixels), prompt)
