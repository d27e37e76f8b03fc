"""Command-line entry point.

Subcommands: ``ground`` (single-pass region extraction), ``refine`` (the
full iterative loop plus answer), ``eval`` (localization against a
manifest), ``ablate`` (one report per value along a declared axis).

Configuration precedence: built-in defaults, then ``--config`` JSON file,
then explicit flags.  The effective configuration is echoed into the
output directory so every run is reproducible from its artifacts.

Exit codes: 0 success (including degenerate maps), 2 input error,
3 backend error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .backends import GradientBackend, make_backend
from .core import View
from .evaluation import (
    ABLATION_AXES,
    ManifestError,
    eval_localization,
    load_manifest,
    run_ablation,
)
from .imaging import PixmapFormatError, read_pixmap, write_pixmap, render_saliency
from .objectives import ObjectiveConfig
from .pipeline import PipelineConfig, extract_regions
from .protocol import BackendUnavailable, ProtocolError
from .refine import RefineConfig, RefinementError, answer_with_views, refine
from .toy import ToyModelConfig

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_BACKEND = 3

BACKEND_ENV = "ENTROPY_GROUND_BACKEND"


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    backend: str = "toy"
    seed: int = 0
    embed_dim: int = 16
    vocab: int = 64
    grid_rows: int = 8
    grid_cols: int = 8
    sigma: float = 1.0
    connectivity: int = 8
    top_k: int = 2
    min_component_tokens: int = 1
    flat_epsilon: float = 1e-9
    objective: str = "entropy"
    top_p_mass: float = 0.9
    decode_step: int = 1
    stopping: str = "spatial_entropy"
    max_iters: int = 4
    min_crop_px: int = 28
    dedupe_iou: float = 0.9
    render: bool = False
    out_dir: str = "runs"
    timeout: float = 60.0

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            sigma=self.sigma,
            connectivity=self.connectivity,
            top_k=self.top_k,
            min_component_tokens=self.min_component_tokens,
            flat_epsilon=self.flat_epsilon,
        )

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(
            kind=self.objective, mass=self.top_p_mass, decode_step=self.decode_step
        )

    def refine_config(self) -> RefineConfig:
        return RefineConfig(
            max_iters=self.max_iters,
            top_k=self.top_k,
            stopping=self.stopping,
            min_crop_px=self.min_crop_px,
            dedupe_iou=self.dedupe_iou,
            objective=self.objective_config(),
        )

    def toy_config(self) -> ToyModelConfig:
        return ToyModelConfig(
            embed_dim=self.embed_dim,
            vocab=self.vocab,
            grid_rows=self.grid_rows,
            grid_cols=self.grid_cols,
            seed=self.seed,
        )

    def resolve_backend_spec(self) -> str:
        if self.backend == "remote":
            endpoint = os.environ.get(BACKEND_ENV)
            if not endpoint:
                raise InputError(
                    f"--backend remote needs the {BACKEND_ENV} environment variable"
                )
            return endpoint
        return self.backend

    def build_backend(self) -> GradientBackend:
        return make_backend(
            self.resolve_backend_spec(), toy_config=self.toy_config(), timeout=self.timeout
        )

    def to_record(self) -> dict:
        return dataclasses.asdict(self)


_OBJECTIVE_ALIASES = {"entropy": "entropy", "top_p": "top_p_entropy", "max_prob": "max_prob"}
_STOPPING_ALIASES = {"spatial": "spatial_entropy", "confidence": "confidence_drop"}


def _normalize_stopping(value: str) -> str:
    if value in _STOPPING_ALIASES:
        return _STOPPING_ALIASES[value]
    return value


def load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"config file {path} is not valid JSON: {exc}") from exc
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        config = dataclasses.replace(config, **data)
    overrides = {}
    flag_map = {
        "backend": "backend",
        "seed": "seed",
        "sigma": "sigma",
        "connectivity": "connectivity",
        "top_k": "top_k",
        "decode_step": "decode_step",
        "top_p_mass": "top_p_mass",
        "max_iters": "max_iters",
        "out": "out_dir",
    }
    for flag, attr in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[attr] = value
    if getattr(args, "objective", None) is not None:
        overrides["objective"] = _OBJECTIVE_ALIASES[args.objective]
    if getattr(args, "stopping", None) is not None:
        overrides["stopping"] = _normalize_stopping(args.stopping)
    if getattr(args, "render", False):
        overrides["render"] = True
    config = dataclasses.replace(config, **overrides)
    try:
        config.pipeline_config()
        config.refine_config()
    except ValueError as exc:
        raise InputError(f"invalid configuration: {exc}") from exc
    return config


def _prepare_out(config: RunConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(config.to_record(), indent=2, sort_keys=True) + "\n"
    )
    return out


def _load_image(path: str):
    p = Path(path)
    if not p.exists():
        raise InputError(f"image not found: {p}")
    try:
        return read_pixmap(p)
    except PixmapFormatError as exc:
        raise InputError(f"cannot read image {p}: {exc}") from exc


def _write_records(path: Path, records: Sequence[dict]) -> None:
    lines = [json.dumps(rec, sort_keys=True) for rec in records]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def cmd_ground(args: argparse.Namespace) -> int:
    config = load_config(args)
    image = _load_image(args.image)
    out = _prepare_out(config)
    backend = config.build_backend()
    try:
        global_view = View(id="global", pixel_rect=image.rect, is_global=True, depth=0)
        [(saliency, summary)] = backend.ground(
            [(global_view, image)], args.prompt, config.objective_config()
        )
        extraction = extract_regions(saliency, config.pipeline_config())
        if extraction.degenerate:
            records = [{"kind": "degenerate", "source_view": "global", "iteration": 0}]
        else:
            records = [p.to_record() for p in extraction.proposals]
        _write_records(out / "regions.jsonl", records)
        if config.render:
            write_pixmap(render_saliency(saliency), out / "heatmap_global.pgm")
            overlay = render_saliency(
                saliency, base=image, outline_rects=[p.pixel_rect for p in extraction.proposals]
            )
            write_pixmap(overlay, out / "overlay_global.ppm")
        return EXIT_OK
    finally:
        backend.close()


def cmd_refine(args: argparse.Namespace) -> int:
    config = load_config(args)
    image = _load_image(args.image)
    out = _prepare_out(config)
    backend = config.build_backend()
    try:
        result = refine(
            image, args.prompt, backend, config.pipeline_config(), config.refine_config()
        )
        answer = answer_with_views(result.view_pixels, args.prompt, backend)
        _write_records(out / "regions.jsonl", [p.to_record() for p in result.proposals])
        _write_records(out / "trace.jsonl", result.trace.to_records())
        (out / "answer.txt").write_text(answer + "\n")
        (out / "views.json").write_text(
            json.dumps(
                [
                    {
                        "id": v.id,
                        "rect": v.pixel_rect.to_record(),
                        "parent": v.parent,
                        "is_global": v.is_global,
                        "depth": v.depth,
                    }
                    for v in result.views
                ],
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
        if config.render and result.trace.records:
            _render_trace(out, image, result)
        return EXIT_OK
    finally:
        backend.close()


def _render_trace(out: Path, image, result) -> None:
    from .core import SaliencyGrid, TokenGrid
    from .imaging import crop

    last = result.trace.records[-1]
    selected_rects = [p.pixel_rect for p in last.selected]
    for view_record in last.per_view:
        rect = view_record.view.pixel_rect
        grid = TokenGrid(
            rows=view_record.rows,
            cols=view_record.cols,
            patch_px=max(1, rect.w // view_record.cols),
            view_rect=rect,
        )
        saliency = SaliencyGrid(grid=grid, scores=list(view_record.scores))
        pixels = crop(image, rect) if not view_record.view.is_global else image
        write_pixmap(
            render_saliency(saliency), out / f"heatmap_{view_record.view.id}.pgm"
        )
        write_pixmap(
            render_saliency(saliency, base=pixels, outline_rects=selected_rects),
            out / f"overlay_{view_record.view.id}.ppm",
        )


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args)
    manifest = load_manifest(args.manifest)
    out = _prepare_out(config)
    default_backend = None
    if not all(r.backend_override for r in manifest.records):
        default_backend = config.build_backend()
    try:
        report = eval_localization(
            manifest,
            default_backend,
            config.pipeline_config(),
            config.refine_config(),
            label="eval",
        )
        _write_records(out / "report.jsonl", report.to_records())
        (out / "report_summary.json").write_text(
            json.dumps(report.summary_record(), indent=2, sort_keys=True) + "\n"
        )
        (out / "report.txt").write_text(report.table() + "\n")
        _write_records(
            out / "timings.jsonl",
            [
                {"sample_id": row.sample_id, "wall_clock_s": wall}
                for row, wall in zip(report.rows, report.wall_clock_s)
            ],
        )
        if report.skipped:
            print(f"warning: {report.skipped} samples skipped (no gt boxes)", file=sys.stderr)
        return EXIT_OK
    finally:
        if default_backend is not None:
            default_backend.close()


def cmd_ablate(args: argparse.Namespace) -> int:
    config = load_config(args)
    manifest = load_manifest(args.manifest)
    out = _prepare_out(config)
    default_backend = None
    if not all(r.backend_override for r in manifest.records):
        default_backend = config.build_backend()
    try:
        result = run_ablation(
            args.axis,
            manifest,
            default_backend,
            config.pipeline_config(),
            config.refine_config(),
        )
        for entry in result.entries:
            safe = entry.value.replace(":", "_")
            _write_records(
                out / f"report_{result.axis}_{safe}.jsonl", entry.report.to_records()
            )
        _write_records(out / "ablation.jsonl", result.to_records())
        (out / "comparison.txt").write_text(result.comparison_table() + "\n")
        return EXIT_OK
    finally:
        if default_backend is not None:
            default_backend.close()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="entropy-ground",
        description="Uncertainty-gradient visual evidence retrieval",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--backend", type=str, default=None,
                       help="toy | stub | remote | tcp:HOST:PORT | cmd:COMMAND")
        p.add_argument("--objective", choices=sorted(_OBJECTIVE_ALIASES), default=None)
        p.add_argument("--top-p-mass", dest="top_p_mass", type=float, default=None)
        p.add_argument("--decode-step", dest="decode_step", type=int, default=None)
        p.add_argument("--top-k", dest="top_k", type=int, default=None)
        p.add_argument("--stopping", type=str, default=None,
                       help="spatial | confidence | fixed:N")
        p.add_argument("--max-iters", dest="max_iters", type=int, default=None)
        p.add_argument("--sigma", type=float, default=None)
        p.add_argument("--connectivity", type=int, choices=(4, 8), default=None)
        p.add_argument("--render", action="store_true")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)

    p_ground = sub.add_parser("ground", help="single-pass saliency and regions")
    p_ground.add_argument("image", type=str)
    p_ground.add_argument("--prompt", type=str, required=True)
    add_common(p_ground)
    p_ground.set_defaults(func=cmd_ground)

    p_refine = sub.add_parser("refine", help="iterative zoom with stopping rule")
    p_refine.add_argument("image", type=str)
    p_refine.add_argument("--prompt", type=str, required=True)
    add_common(p_refine)
    p_refine.set_defaults(func=cmd_refine)

    p_eval = sub.add_parser("eval", help="localization eval over a manifest")
    p_eval.add_argument("manifest", type=str)
    add_common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="one report per value along an axis")
    p_ablate.add_argument("manifest", type=str)
    p_ablate.add_argument("axis", choices=sorted(ABLATION_AXES))
    add_common(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (BackendUnavailable, ProtocolError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except RefinementError as exc:
        print(f"backend error: {exc} ({len(exc.trace)} iterations completed)", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
