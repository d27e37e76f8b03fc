"""Line-delimited wire protocol between the engine and gradient backends.

One UTF-8 JSON object per line; every message is self-describing via its
``op`` field.  Requests: ``ground``, ``answer``, ``ping``.  Responses:
``ground_response``, ``answer_response``, ``ping_response``, ``error``.
One request is in flight per connection at a time, so a response always
answers the most recent request (ids are still echoed and checked).

The full field-by-field schema lives in docs/protocol.md; decoding here
validates everything the engine relies on (shapes, finiteness,
non-negativity) so malformed remote data never crosses the boundary.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .imaging import RasterImage
from .objectives import NextTokenSummary, ObjectiveConfig


class ProtocolError(Exception):
    """Malformed or contract-violating message; keeps the raw payload."""

    def __init__(self, message: str, raw: str | bytes | None = None):
        super().__init__(message)
        self.raw = raw


class BackendUnavailable(Exception):
    """Transport-level failure: dead process, refused connection, timeout."""


@dataclass(frozen=True)
class ImagePayload:
    """Raster pixels on the wire: inline base64 samples or a file path."""

    width: int
    height: int
    fmt: str  # "gray8" | "rgb8"
    data_b64: Optional[str] = None
    path: Optional[str] = None

    @staticmethod
    def from_raster(image: RasterImage) -> "ImagePayload":
        return ImagePayload(
            width=image.width,
            height=image.height,
            fmt="gray8" if image.channels == 1 else "rgb8",
            data_b64=base64.b64encode(image.samples.tobytes()).decode("ascii"),
        )

    def to_raster(self) -> RasterImage:
        channels = {"gray8": 1, "rgb8": 3}[self.fmt]
        if self.data_b64 is not None:
            raw = base64.b64decode(self.data_b64)
            samples = np.frombuffer(raw, dtype=np.uint8)
        elif self.path is not None:
            from .imaging import read_pixmap

            img = read_pixmap(self.path)
            if img.channels != channels or (img.width, img.height) != (self.width, self.height):
                raise ProtocolError(f"pixmap at {self.path} does not match declared shape")
            return img
        else:
            raise ProtocolError("image payload carries neither data nor path")
        expected = self.width * self.height * channels
        if samples.size != expected:
            raise ProtocolError(
                f"image payload has {samples.size} samples, declared shape needs {expected}"
            )
        return RasterImage(self.width, self.height, channels, samples)

    def to_record(self) -> dict:
        rec = {"width": self.width, "height": self.height, "format": self.fmt}
        if self.data_b64 is not None:
            rec["data_b64"] = self.data_b64
        if self.path is not None:
            rec["path"] = self.path
        return rec

    @staticmethod
    def from_record(rec: dict) -> "ImagePayload":
        fmt = rec.get("format")
        if fmt not in ("gray8", "rgb8"):
            raise ProtocolError(f"unknown image format {fmt!r}")
        return ImagePayload(
            width=int(rec["width"]),
            height=int(rec["height"]),
            fmt=fmt,
            data_b64=rec.get("data_b64"),
            path=rec.get("path"),
        )


@dataclass(frozen=True)
class ViewPayload:
    """One view: its rect in original-image coordinates plus pixels."""

    view_id: str
    x: int
    y: int
    w: int
    h: int
    is_global: bool
    image: ImagePayload

    def to_record(self) -> dict:
        return {
            "view_id": self.view_id,
            "x": self.x,
            "y": self.y,
            "w": self.w,
            "h": self.h,
            "is_global": self.is_global,
            "image": self.image.to_record(),
        }

    @staticmethod
    def from_record(rec: dict) -> "ViewPayload":
        return ViewPayload(
            view_id=str(rec["view_id"]),
            x=int(rec["x"]),
            y=int(rec["y"]),
            w=int(rec["w"]),
            h=int(rec["h"]),
            is_global=bool(rec["is_global"]),
            image=ImagePayload.from_record(rec["image"]),
        )


def _check_views(views: tuple) -> None:
    if not views:
        raise ProtocolError("request must carry at least one view")
    if not views[0].is_global:
        raise ProtocolError("first view must be flagged global")


@dataclass(frozen=True)
class GroundRequest:
    request_id: str
    prompt: str
    objective: ObjectiveConfig
    views: tuple[ViewPayload, ...]
    tap_layer: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "views", tuple(self.views))
        _check_views(self.views)


@dataclass(frozen=True)
class GridPayload:
    """One saliency grid plus distribution statistics for one view."""

    rows: int
    cols: int
    scores: tuple[float, ...]
    entropy: float
    max_prob: float
    vocab: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if self.rows < 1 or self.cols < 1:
            raise ProtocolError(f"invalid grid dims {self.rows}x{self.cols}")
        if len(self.scores) != self.rows * self.cols:
            raise ProtocolError(
                f"grid declares {self.rows}x{self.cols} but carries {len(self.scores)} scores"
            )
        for s in self.scores:
            if not math.isfinite(s) or s < 0:
                raise ProtocolError(f"saliency score {s} is not finite and non-negative")
        if not (0.0 < self.max_prob <= 1.0):
            raise ProtocolError(f"max_prob {self.max_prob} outside (0, 1]")
        if self.vocab < 1 or not math.isfinite(self.entropy) or self.entropy < -1e-9:
            raise ProtocolError(f"bad distribution stats: entropy={self.entropy} vocab={self.vocab}")

    def summary(self, decode_step: int) -> NextTokenSummary:
        return NextTokenSummary(
            vocab=self.vocab,
            decode_step=decode_step,
            max_prob=self.max_prob,
            entropy=self.entropy,
        )


@dataclass(frozen=True)
class GroundResponse:
    request_id: str
    grids: tuple[GridPayload, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "grids", tuple(self.grids))


@dataclass(frozen=True)
class AnswerRequest:
    request_id: str
    prompt: str
    views: tuple[ViewPayload, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "views", tuple(self.views))
        _check_views(self.views)


@dataclass(frozen=True)
class AnswerResponse:
    request_id: str
    answer: str


@dataclass(frozen=True)
class PingRequest:
    request_id: str


@dataclass(frozen=True)
class PingResponse:
    request_id: str
    backend: str


@dataclass(frozen=True)
class ErrorResponse:
    request_id: str
    error_type: str
    message: str


Message = (
    GroundRequest
    | GroundResponse
    | AnswerRequest
    | AnswerResponse
    | PingRequest
    | PingResponse
    | ErrorResponse
)


def _encode_ground_request(m: GroundRequest) -> dict:
    rec = {
        "id": m.request_id,
        "op": "ground",
        "prompt": m.prompt,
        "objective": m.objective.to_record(),
        "views": [v.to_record() for v in m.views],
    }
    if m.tap_layer is not None:
        rec["tap_layer"] = m.tap_layer
    return rec


def _decode_ground_request(rec: dict) -> GroundRequest:
    return GroundRequest(
        request_id=str(rec["id"]),
        prompt=str(rec["prompt"]),
        objective=ObjectiveConfig.from_record(rec["objective"]),
        views=tuple(ViewPayload.from_record(v) for v in rec["views"]),
        tap_layer=rec.get("tap_layer"),
    )


def _encode_ground_response(m: GroundResponse) -> dict:
    return {
        "id": m.request_id,
        "op": "ground_response",
        "grids": [
            {
                "rows": g.rows,
                "cols": g.cols,
                "scores": list(g.scores),
                "entropy": g.entropy,
                "max_prob": g.max_prob,
                "vocab": g.vocab,
            }
            for g in m.grids
        ],
    }


def _decode_ground_response(rec: dict) -> GroundResponse:
    grids = tuple(
        GridPayload(
            rows=int(g["rows"]),
            cols=int(g["cols"]),
            scores=tuple(g["scores"]),
            entropy=float(g["entropy"]),
            max_prob=float(g["max_prob"]),
            vocab=int(g["vocab"]),
        )
        for g in rec["grids"]
    )
    return GroundResponse(request_id=str(rec["id"]), grids=grids)


_ENCODERS = {
    GroundRequest: _encode_ground_request,
    GroundResponse: _encode_ground_response,
    AnswerRequest: lambda m: {
        "id": m.request_id,
        "op": "answer",
        "prompt": m.prompt,
        "views": [v.to_record() for v in m.views],
    },
    AnswerResponse: lambda m: {"id": m.request_id, "op": "answer_response", "answer": m.answer},
    PingRequest: lambda m: {"id": m.request_id, "op": "ping"},
    PingResponse: lambda m: {"id": m.request_id, "op": "ping_response", "backend": m.backend},
    ErrorResponse: lambda m: {
        "id": m.request_id,
        "op": "error",
        "error_type": m.error_type,
        "message": m.message,
    },
}

_DECODERS = {
    "ground": _decode_ground_request,
    "ground_response": _decode_ground_response,
    "answer": lambda rec: AnswerRequest(
        request_id=str(rec["id"]),
        prompt=str(rec["prompt"]),
        views=tuple(ViewPayload.from_record(v) for v in rec["views"]),
    ),
    "answer_response": lambda rec: AnswerResponse(
        request_id=str(rec["id"]), answer=str(rec["answer"])
    ),
    "ping": lambda rec: PingRequest(request_id=str(rec["id"])),
    "ping_response": lambda rec: PingResponse(
        request_id=str(rec["id"]), backend=str(rec["backend"])
    ),
    "error": lambda rec: ErrorResponse(
        request_id=str(rec["id"]),
        error_type=str(rec["error_type"]),
        message=str(rec["message"]),
    ),
}


def encode(message: Message) -> bytes:
    """One UTF-8 line, newline-terminated.  Non-finite floats are rejected."""
    encoder = _ENCODERS.get(type(message))
    if encoder is None:
        raise ProtocolError(f"cannot encode {type(message).__name__}")
    return (json.dumps(encoder(message), allow_nan=False) + "\n").encode("utf-8")


def decode(line: bytes | str) -> Message:
    """Parse one line into its message; raises ProtocolError with the raw line."""
    text = line.decode("utf-8") if isinstance(line, bytes) else line
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"invalid JSON: {exc}", raw=line) from exc
    if not isinstance(rec, dict):
        raise ProtocolError("message must be a JSON object", raw=line)
    op = rec.get("op")
    decoder = _DECODERS.get(op)
    if decoder is None:
        raise ProtocolError(f"unknown op {op!r}", raw=line)
    try:
        return decoder(rec)
    except ProtocolError as exc:
        if exc.raw is None:
            exc.raw = line
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed {op} message: {exc}", raw=line) from exc
