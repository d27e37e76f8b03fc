"""Localization evaluation, synthetic planted-evidence benchmarks, ablations.

Manifests are line-delimited JSON records (one sample per line), so they
stream and diff cleanly.  Localization scores each sample by the best
rect IoU between refined proposals and ground-truth boxes; the planted
benchmark manufactures samples where the ground truth is exact by
construction: a toy backend is masked so only one block of tokens can
influence its output.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .backends import GradientBackend, ToyBackend
from .core import PixelRect, rect_iou
from .imaging import RasterImage, from_array, read_pixmap, write_pixmap
from .objectives import ObjectiveConfig
from .pipeline import PipelineConfig
from .refine import RefineConfig, RefinementError, refine
from .toy import ToyModelConfig

OPEN_ENDED_SUFFIX = "Answer the question using a single word or phrase."
MULTIPLE_CHOICE_SUFFIX = "Answer with the option's letter from the given choices directly."


class ManifestError(Exception):
    def __init__(self, message: str, line_number: Optional[int] = None):
        super().__init__(message)
        self.line_number = line_number


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    image_path: str
    question: str
    answer_type: str = "open"  # "open" | "multiple_choice"
    options: tuple[str, ...] = ()
    gt_boxes: tuple[PixelRect, ...] = ()
    gt_answer: Optional[str] = None
    backend_override: Optional[dict] = None

    def __post_init__(self) -> None:
        if self.answer_type not in ("open", "multiple_choice"):
            raise ManifestError(f"unknown answer_type {self.answer_type!r}")
        if self.answer_type == "multiple_choice" and not self.options:
            raise ManifestError(f"sample {self.sample_id} is multiple_choice without options")

    def prompt(self) -> str:
        if self.answer_type == "open":
            return f"{self.question}\n{OPEN_ENDED_SUFFIX}"
        lines = [self.question]
        for i, option in enumerate(self.options):
            lines.append(f"({chr(ord('A') + i)}) {option}")
        lines.append(MULTIPLE_CHOICE_SUFFIX)
        return "\n".join(lines)

    def to_record(self) -> dict:
        rec: dict = {
            "sample_id": self.sample_id,
            "image": self.image_path,
            "question": self.question,
            "answer_type": self.answer_type,
        }
        if self.options:
            rec["options"] = list(self.options)
        if self.gt_boxes:
            rec["gt_boxes"] = [[b.x, b.y, b.w, b.h] for b in self.gt_boxes]
        if self.gt_answer is not None:
            rec["gt_answer"] = self.gt_answer
        if self.backend_override is not None:
            rec["backend"] = self.backend_override
        return rec

    @staticmethod
    def from_record(rec: dict) -> "SampleRecord":
        return SampleRecord(
            sample_id=str(rec["sample_id"]),
            image_path=str(rec["image"]),
            question=str(rec["question"]),
            answer_type=rec.get("answer_type", "open"),
            options=tuple(rec.get("options", ())),
            gt_boxes=tuple(PixelRect(*box) for box in rec.get("gt_boxes", ())),
            gt_answer=rec.get("gt_answer"),
            backend_override=rec.get("backend"),
        )


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SampleRecord, ...]
    base_dir: Path = Path(".")

    def __post_init__(self) -> None:
        ids = [r.sample_id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate sample ids: {dupes}")

    def __len__(self) -> int:
        return len(self.records)

    def image_path(self, record: SampleRecord) -> Path:
        path = Path(record.image_path)
        return path if path.is_absolute() else self.base_dir / path


def load_manifest(path: str | Path, check_images: bool = True) -> DatasetManifest:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(SampleRecord.from_record(json.loads(line)))
        except ManifestError as exc:
            raise ManifestError(f"bad manifest line {lineno}: {exc}", lineno) from exc
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"bad manifest line {lineno}: {exc}", lineno) from exc
    manifest = DatasetManifest(records=tuple(records), base_dir=path.parent)
    if check_images:
        for record in manifest.records:
            img = manifest.image_path(record)
            if not img.exists():
                raise ManifestError(f"sample {record.sample_id}: image {img} not found")
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = [json.dumps(r.to_record(), sort_keys=True) for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n")


# -- evaluation -----------------------------------------------------------------


@dataclass
class SampleResult:
    sample_id: str
    best_iou: float
    top_iou: float
    n_proposals: int
    iterations: int
    answer: Optional[str] = None

    def to_record(self) -> dict:
        rec = {
            "sample_id": self.sample_id,
            "best_iou": self.best_iou,
            "top_iou": self.top_iou,
            "n_proposals": self.n_proposals,
            "iterations": self.iterations,
        }
        if self.answer is not None:
            rec["answer"] = self.answer
        return rec


@dataclass
class EvalReport:
    rows: list[SampleResult]
    mean_iou: float
    hit_rate_05: float
    skipped: int
    wall_clock_s: list[float] = field(default_factory=list)
    label: str = ""

    @staticmethod
    def from_rows(rows: list[SampleResult], skipped: int, wall: list[float], label: str = "") -> "EvalReport":
        ious = [r.best_iou for r in rows]
        return EvalReport(
            rows=rows,
            mean_iou=float(np.mean(ious)) if ious else 0.0,
            hit_rate_05=float(np.mean([iou >= 0.5 for iou in ious])) if ious else 0.0,
            skipped=skipped,
            wall_clock_s=wall,
            label=label,
        )

    def to_records(self) -> list[dict]:
        return [r.to_record() for r in self.rows]

    def summary_record(self) -> dict:
        return {
            "label": self.label,
            "samples": len(self.rows),
            "skipped": self.skipped,
            "mean_iou": self.mean_iou,
            "hit_rate@0.5": self.hit_rate_05,
            "mean_iterations": float(np.mean([r.iterations for r in self.rows])) if self.rows else 0.0,
        }

    def table(self) -> str:
        lines = [f"{'sample':<16}{'best_iou':>10}{'top_iou':>10}{'props':>7}{'iters':>7}"]
        for r in self.rows:
            lines.append(
                f"{r.sample_id:<16}{r.best_iou:>10.4f}{r.top_iou:>10.4f}"
                f"{r.n_proposals:>7}{r.iterations:>7}"
            )
        lines.append(
            f"mean IoU {self.mean_iou:.4f} | hit@0.5 {self.hit_rate_05 * 100:.1f}% "
            f"| {len(self.rows)} samples, {self.skipped} skipped"
        )
        return "\n".join(lines)


BackendFactory = Callable[[SampleRecord], GradientBackend]


def backend_for_sample(
    record: SampleRecord, default: Optional[GradientBackend]
) -> GradientBackend:
    """Per-record toy overrides beat the shared backend (planted benchmarks)."""
    if record.backend_override is not None:
        override = dict(record.backend_override)
        kind = override.pop("kind", "toy")
        if kind != "toy":
            raise ManifestError(f"sample {record.sample_id}: unsupported backend override {kind!r}")
        return ToyBackend(ToyModelConfig.from_record(override))
    if default is None:
        raise ManifestError(f"sample {record.sample_id} has no backend")
    return default


def eval_localization(
    manifest: DatasetManifest,
    backend: Optional[GradientBackend],
    pipeline_config: PipelineConfig,
    refine_config: RefineConfig,
    with_answers: bool = False,
    label: str = "",
) -> EvalReport:
    """Best-proposal IoU against ground-truth boxes, per sample.

    Samples without gt boxes are skipped (counted, warned in the report).
    """
    rows: list[SampleResult] = []
    wall: list[float] = []
    skipped = 0
    for record in manifest.records:
        if not record.gt_boxes:
            skipped += 1
            continue
        image = read_pixmap(manifest.image_path(record))
        sample_backend = backend_for_sample(record, backend)
        start = time.perf_counter()
        result = refine(image, record.prompt(), sample_backend, pipeline_config, refine_config)
        answer = None
        if with_answers:
            answer = sample_backend.answer(list(result.view_pixels), record.prompt())
        wall.append(time.perf_counter() - start)
        if result.proposals:
            best = max(
                rect_iou(p.pixel_rect, gt)
                for p in result.proposals
                for gt in record.gt_boxes
            )
            top = max(rect_iou(result.proposals[0].pixel_rect, gt) for gt in record.gt_boxes)
        else:
            best = top = 0.0
        rows.append(
            SampleResult(
                sample_id=record.sample_id,
                best_iou=best,
                top_iou=top,
                n_proposals=len(result.proposals),
                iterations=len(result.trace),
                answer=answer,
            )
        )
    return EvalReport.from_rows(rows, skipped, wall, label=label)


# -- planted-evidence benchmark ---------------------------------------------------


@dataclass(frozen=True)
class PlantedConfig:
    n_samples: int = 100
    image_w: int = 64
    image_h: int = 64
    grid_rows: int = 8
    grid_cols: int = 8
    block_rows: int = 2
    block_cols: int = 2
    seed: int = 0
    embed_dim: int = 16
    vocab: int = 64

    def __post_init__(self) -> None:
        if self.block_rows > self.grid_rows or self.block_cols > self.grid_cols:
            raise ValueError("planted block must fit in the token grid")


def generate_planted(config: PlantedConfig, out_dir: str | Path) -> DatasetManifest:
    """Write n synthetic samples with exact localization ground truth.

    Each sample is a noise image with a brightened block; its toy backend
    is attention-masked to exactly the block's tokens, so by
    zero-influence invariance every saliency response originates inside
    the block and the block rect is a perfect gt box.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    records = []
    for i in range(config.n_samples):
        r0 = int(rng.integers(0, config.grid_rows - config.block_rows + 1))
        c0 = int(rng.integers(0, config.grid_cols - config.block_cols + 1))
        block_tokens = frozenset(
            r * config.grid_cols + c
            for r in range(r0, r0 + config.block_rows)
            for c in range(c0, c0 + config.block_cols)
        )
        x1 = (c0 * config.image_w) // config.grid_cols
        x2 = ((c0 + config.block_cols) * config.image_w) // config.grid_cols
        y1 = (r0 * config.image_h) // config.grid_rows
        y2 = ((r0 + config.block_rows) * config.image_h) // config.grid_rows
        gt_box = PixelRect(x1, y1, x2 - x1, y2 - y1)

        pixels = rng.integers(0, 192, size=(config.image_h, config.image_w), dtype=np.uint8)
        pixels[y1:y2, x1:x2] = np.minimum(pixels[y1:y2, x1:x2].astype(np.int64) + 64, 255).astype(
            np.uint8
        )
        name = f"planted_{i:04d}.pgm"
        write_pixmap(from_array(pixels), out_dir / name)

        toy = ToyModelConfig(
            embed_dim=config.embed_dim,
            vocab=config.vocab,
            grid_rows=config.grid_rows,
            grid_cols=config.grid_cols,
            seed=config.seed * 1_000_003 + i,
            attention_mask=block_tokens,
        )
        records.append(
            SampleRecord(
                sample_id=f"planted_{i:04d}",
                image_path=name,
                question="Which part of the image stands out?",
                answer_type="open",
                gt_boxes=(gt_box,),
                backend_override={"kind": "toy", **toy.to_record()},
            )
        )
    manifest = DatasetManifest(records=tuple(records), base_dir=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


# -- ablation runner ---------------------------------------------------------------


ABLATION_AXES = {
    "stopping_policy": ["spatial_entropy", "confidence_drop", "fixed:1", "fixed:2", "fixed:3"],
    "objective": ["entropy", "top_p_entropy", "max_prob"],
    "top_k": [1, 2, 3, 4],
    "decode_step": [1, 2, 3, 4],
}

# Flattened config keys each axis is allowed to change.
AXIS_KEYS = {
    "stopping_policy": {"stopping"},
    "objective": {"objective.kind"},
    "top_k": {"top_k"},
    "decode_step": {"objective.decode_step"},
}


def flatten_config(pipeline: PipelineConfig, refine_cfg: RefineConfig) -> dict:
    """One flat dict per run; the audit diff is computed on these keys."""
    if pipeline.top_k != refine_cfg.top_k:
        raise ValueError("pipeline and refine top_k must agree for ablation audits")
    return {
        "sigma": pipeline.sigma,
        "connectivity": pipeline.connectivity,
        "min_component_tokens": pipeline.min_component_tokens,
        "flat_epsilon": pipeline.flat_epsilon,
        "top_k": refine_cfg.top_k,
        "stopping": refine_cfg.stopping,
        "max_iters": refine_cfg.max_iters,
        "min_crop_px": refine_cfg.min_crop_px,
        "dedupe_iou": refine_cfg.dedupe_iou,
        "objective.kind": refine_cfg.objective.kind,
        "objective.mass": refine_cfg.objective.mass,
        "objective.decode_step": refine_cfg.objective.decode_step,
    }


def apply_axis(
    pipeline: PipelineConfig, refine_cfg: RefineConfig, axis: str, value
) -> tuple[PipelineConfig, RefineConfig]:
    if axis == "stopping_policy":
        return pipeline, replace(refine_cfg, stopping=str(value))
    if axis == "objective":
        objective = replace(refine_cfg.objective, kind=str(value))
        return pipeline, replace(refine_cfg, objective=objective)
    if axis == "top_k":
        return replace(pipeline, top_k=int(value)), replace(refine_cfg, top_k=int(value))
    if axis == "decode_step":
        objective = replace(refine_cfg.objective, decode_step=int(value))
        return pipeline, replace(refine_cfg, objective=objective)
    raise ValueError(f"unknown ablation axis {axis!r}")


@dataclass
class AblationEntry:
    value: str
    config: dict
    diff_keys: list[str]
    report: EvalReport


@dataclass
class AblationResult:
    axis: str
    entries: list[AblationEntry]

    def comparison_table(self) -> str:
        lines = [f"ablation axis: {self.axis}"]
        header = f"{'value':<18}{'mean_iou':>10}{'hit@0.5':>10}{'iters':>8}  changed"
        lines.append(header)
        for e in self.entries:
            s = e.report.summary_record()
            lines.append(
                f"{e.value:<18}{s['mean_iou']:>10.4f}{s['hit_rate@0.5']:>10.3f}"
                f"{s['mean_iterations']:>8.2f}  {','.join(e.diff_keys) or '-'}"
            )
        return "\n".join(lines)

    def to_records(self) -> list[dict]:
        return [
            {
                "axis": self.axis,
                "value": e.value,
                "config": e.config,
                "diff_keys": e.diff_keys,
                "summary": e.report.summary_record(),
            }
            for e in self.entries
        ]


def run_ablation(
    axis: str,
    manifest: DatasetManifest,
    backend: Optional[GradientBackend],
    pipeline_config: PipelineConfig,
    refine_config: RefineConfig,
    values: Optional[Sequence] = None,
) -> AblationResult:
    """One EvalReport per axis value; everything else held fixed.

    Each entry carries the flattened effective config and the keys on
    which it differs from the axis's first value, so the audit that only
    the declared axis moved is mechanical.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; valid: {sorted(ABLATION_AXES)}")
    values = list(values if values is not None else ABLATION_AXES[axis])
    entries: list[AblationEntry] = []
    base_flat: Optional[dict] = None
    for value in values:
        pipe, ref = apply_axis(pipeline_config, refine_config, axis, value)
        flat = flatten_config(pipe, ref)
        if base_flat is None:
            base_flat = flat
        diff = sorted(k for k in flat if flat[k] != base_flat[k])
        report = eval_localization(
            manifest, backend, pipe, ref, label=f"{axis}={value}"
        )
        entries.append(
            AblationEntry(value=str(value), config=flat, diff_keys=diff, report=report)
        )
    return AblationResult(axis=axis, entries=entries)
