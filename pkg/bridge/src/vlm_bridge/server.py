"""The sidecar's protocol loop.

Implements the engine's line-delimited JSON wire format (one message per
line, self-describing ``op``, one request in flight): ``ping``,
``ground``, ``answer``.  Model failures are reported in-band as ``error``
messages and the process keeps serving.
"""
from __future__ import annotations

import base64
import json
import socket
import sys
from typing import BinaryIO

import numpy as np

from .config import BridgeConfig
from .models import BridgeModel, load_model


class PayloadError(Exception):
    pass


def decode_image(rec: dict) -> np.ndarray:
    """Inline base64 raster or a PGM/PPM path -> (h, w, c) uint8 array."""
    width, height = int(rec["width"]), int(rec["height"])
    fmt = rec.get("format")
    if fmt not in ("gray8", "rgb8"):
        raise PayloadError(f"unknown image format {fmt!r}")
    channels = 1 if fmt == "gray8" else 3
    if rec.get("data_b64") is not None:
        samples = np.frombuffer(base64.b64decode(rec["data_b64"]), dtype=np.uint8)
    elif rec.get("path") is not None:
        samples = _read_pixmap_samples(rec["path"], width, height, channels)
    else:
        raise PayloadError("image payload carries neither data nor path")
    if samples.size != width * height * channels:
        raise PayloadError(
            f"payload has {samples.size} samples, declared shape needs "
            f"{width * height * channels}"
        )
    return samples.reshape(height, width, channels)


def _read_pixmap_samples(path: str, width: int, height: int, channels: int) -> np.ndarray:
    data = open(path, "rb").read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4 and pos < len(data):
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    expected = {b"P5": 1, b"P6": 3}.get(magic)
    if expected != channels or (w, h) != (width, height) or maxval != 255:
        raise PayloadError(f"pixmap {path} does not match the declared payload shape")
    return np.frombuffer(data[pos + 1 : pos + 1 + w * h * channels], dtype=np.uint8)


class BridgeServer:
    def __init__(self, config: BridgeConfig, model: BridgeModel | None = None):
        self.config = config
        self.model = model if model is not None else load_model(config.model, config.device)

    def handle_line(self, line: bytes) -> bytes:
        request_id = "?"
        try:
            rec = json.loads(line)
            request_id = str(rec.get("id", "?"))
            op = rec.get("op")
            if op == "ping":
                reply = {"id": request_id, "op": "ping_response", "backend": self.model.describe()}
            elif op == "ground":
                reply = self._ground(rec)
            elif op == "answer":
                reply = self._answer(rec)
            else:
                reply = _error(request_id, "protocol", f"unknown op {op!r}")
        except Exception as exc:  # serve on: report in-band, never die
            reply = _error(request_id, type(exc).__name__, str(exc))
        return (json.dumps(reply) + "\n").encode("utf-8")

    def _ground(self, rec: dict) -> dict:
        objective = rec.get("objective", {})
        kind = objective.get("kind", "entropy")
        mass = float(objective.get("mass", 0.9))
        decode_step = int(objective.get("decode_step", 1))
        tap_layer = rec.get("tap_layer", self.config.tap_layer)
        prompt = self.config.apply_template(str(rec["prompt"]))
        grids = []
        for view in rec["views"]:
            image = decode_image(view["image"])
            result = self.model.ground_view(image, prompt, kind, mass, decode_step, tap_layer)
            scores = np.asarray(result.scores, dtype=np.float64)
            if not np.all(np.isfinite(scores)) or np.any(scores < 0):
                raise PayloadError("model produced non-finite or negative saliency")
            grids.append(
                {
                    "rows": int(scores.shape[0]),
                    "cols": int(scores.shape[1]),
                    "scores": [float(s) for s in scores.ravel()],
                    "entropy": result.entropy,
                    "max_prob": min(1.0, result.max_prob),
                    "vocab": result.vocab,
                }
            )
        return {"id": str(rec["id"]), "op": "ground_response", "grids": grids}

    def _answer(self, rec: dict) -> dict:
        prompt = self.config.apply_template(str(rec["prompt"]))
        images = [decode_image(view["image"]) for view in rec["views"]]
        text = self.model.answer(images, prompt, self.config.max_answer_tokens)
        return {"id": str(rec["id"]), "op": "answer_response", "answer": text}

    # -- transports ------------------------------------------------------------

    def serve_stream(self, reader: BinaryIO, writer: BinaryIO) -> None:
        for line in iter(reader.readline, b""):
            if not line.strip():
                continue
            writer.write(self.handle_line(line))
            writer.flush()

    def serve_stdio(self) -> None:
        self.serve_stream(sys.stdin.buffer, sys.stdout.buffer)

    def serve_tcp(self, host: str, port: int) -> None:
        srv = socket.create_server((host, port))
        try:
            while True:
                conn, _ = srv.accept()
                with conn:
                    self.serve_stream(conn.makefile("rb"), conn.makefile("wb"))
        finally:
            srv.close()


def _error(request_id: str, error_type: str, message: str) -> dict:
    return {"id": request_id, "op": "error", "error_type": error_type, "message": message}
