"""GradientBackend implementations and the transports that carry them.

Every pipeline stage talks to a GradientBackend: the in-process toy model,
a fixed-function stub (for transport-equivalence testing), or a remote
process speaking the line protocol over stdio or TCP.  In-process and
remote backends satisfy the identical contract, so the refinement loop
cannot tell them apart.
"""
from __future__ import annotations

import math
import os
import shlex
import socket
import subprocess
import selectors
import sys
import threading
from abc import ABC, abstractmethod
from typing import Optional, Sequence

import numpy as np

from .core import PixelRect, SaliencyGrid, TokenGrid, View
from .imaging import RasterImage
from .objectives import NextTokenSummary, ObjectiveConfig
from .protocol import (
    AnswerRequest,
    AnswerResponse,
    BackendUnavailable,
    ErrorResponse,
    GridPayload,
    GroundRequest,
    GroundResponse,
    ImagePayload,
    PingRequest,
    PingResponse,
    ProtocolError,
    ViewPayload,
    decode,
    encode,
)
from .toy import ToyModel, ToyModelConfig, hash_prompt

ViewPixels = tuple[View, RasterImage]


class GradientBackend(ABC):
    """Serves saliency grids, distribution stats, and answers for view sets."""

    @abstractmethod
    def ground(
        self,
        views: Sequence[ViewPixels],
        prompt: str,
        objective: ObjectiveConfig,
        tap_layer: Optional[int] = None,
    ) -> list[tuple[SaliencyGrid, NextTokenSummary]]:
        """One (saliency grid, next-token summary) per view, same order."""

    @abstractmethod
    def answer(self, views: Sequence[ViewPixels], prompt: str) -> str:
        """Answer text given the global view first, then crops."""

    @abstractmethod
    def ping(self) -> str:
        """Identifier of the serving backend; raises if unreachable."""

    def close(self) -> None:  # pragma: no cover - default no-op
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _grid_for_view(view: View, rows: int, cols: int) -> TokenGrid:
    rect = view.pixel_rect
    return TokenGrid(
        rows=rows,
        cols=cols,
        patch_px=max(1, round(min(rect.w / cols, rect.h / rows))),
        view_rect=rect,
    )


class ToyBackend(GradientBackend):
    """In-process adapter over the deterministic toy model."""

    def __init__(self, config: ToyModelConfig, original_rect: Optional[PixelRect] = None):
        self.model = ToyModel(config)
        self.config = config
        # The rect the attention mask is defined over; inferred from the
        # first global view seen when not given up front.
        self._original = original_rect

    def _original_for(self, views: Sequence[ViewPixels]) -> PixelRect:
        if self._original is not None:
            return self._original
        return views[0][0].pixel_rect

    def ground(self, views, prompt, objective, tap_layer=None):
        tokens = hash_prompt(prompt, self.config.vocab)
        original = self._original_for(views)
        out = []
        for view, pixels in views:
            emb = self.model.embed_image(pixels, view_rect=view.pixel_rect)
            res = self.model.saliency(emb, tokens, objective, original=original)
            out.append((res.saliency, res.summary))
        return out

    def answer(self, views, prompt) -> str:
        tokens = hash_prompt(prompt, self.config.vocab)
        original = self._original_for(views)
        embeddings = [
            self.model.embed_image(pixels, view_rect=view.pixel_rect)
            for view, pixels in views
        ]
        return str(self.model.answer_token(embeddings, tokens, original=original))

    def ping(self) -> str:
        return f"toy(seed={self.config.seed})"


class StubBackend(GradientBackend):
    """Fixed-function backend: saliency from patch intensity, no model.

    Deterministic in its inputs only, so results must be identical whether
    it runs in-process or behind the wire; the transport-equivalence suite
    relies on that.
    """

    def __init__(self, rows: int = 8, cols: int = 8, vocab: int = 32):
        self.rows = rows
        self.cols = cols
        self.vocab = vocab

    def _scores(self, pixels: RasterImage) -> np.ndarray:
        from .toy import patch_features

        feats = patch_features(pixels, self.rows, self.cols)
        return feats[:, 0]  # mean gray per patch, already in [0, 1]

    def ground(self, views, prompt, objective, tap_layer=None):
        out = []
        for view, pixels in views:
            grid = _grid_for_view(view, self.rows, self.cols)
            scores = self._scores(pixels)
            top = float(scores.max())
            total = float(scores.sum()) or 1.0
            summary = NextTokenSummary(
                vocab=self.vocab,
                decode_step=objective.decode_step,
                max_prob=min(1.0, max(top / total, 1.0 / self.vocab)),
                entropy=0.5 * math.log(self.vocab),
            )
            out.append((SaliencyGrid(grid=grid, scores=scores), summary))
        return out

    def answer(self, views, prompt) -> str:
        token = hash_prompt(prompt, self.vocab)[0]
        return f"stub:{len(views)}:{token}"

    def ping(self) -> str:
        return f"stub({self.rows}x{self.cols})"


# -- remote client ------------------------------------------------------------


class Transport(ABC):
    @abstractmethod
    def roundtrip(self, line: bytes) -> bytes:
        """Send one request line, return one response line."""

    def close(self) -> None:  # pragma: no cover - default no-op
        pass


class ChildProcessTransport(Transport):
    """Runs the backend as a child process, one line per request on stdio."""

    def __init__(self, command: Sequence[str], timeout: float = 60.0):
        self.timeout = timeout
        try:
            self.proc = subprocess.Popen(
                list(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
            )
        except OSError as exc:
            raise BackendUnavailable(f"cannot launch backend: {exc}") from exc
        self._lock = threading.Lock()
        self._buf = bytearray()

    def roundtrip(self, line: bytes) -> bytes:
        with self._lock:
            if self.proc.poll() is not None:
                raise BackendUnavailable("backend process has exited")
            try:
                self.proc.stdin.write(line)
                self.proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise BackendUnavailable(f"backend pipe closed: {exc}") from exc
            return self._read_line()

    def _read_line(self) -> bytes:
        # Raw fd reads with select-based timeouts; buffered readers would
        # hold data invisible to select and block without a deadline.
        fd = self.proc.stdout.fileno()
        sel = selectors.DefaultSelector()
        sel.register(fd, selectors.EVENT_READ)
        try:
            while b"\n" not in self._buf:
                if not sel.select(self.timeout):
                    raise BackendUnavailable(f"backend timed out after {self.timeout}s")
                chunk = os.read(fd, 1 << 16)
                if not chunk:
                    raise BackendUnavailable("backend closed its output stream")
                self._buf.extend(chunk)
        finally:
            sel.close()
        pos = self._buf.index(b"\n") + 1
        line, self._buf = bytes(self._buf[:pos]), self._buf[pos:]
        return line

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()


class TcpTransport(Transport):
    """Connects to a backend served on a TCP socket."""

    def __init__(self, host: str, port: int, timeout: float = 60.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise BackendUnavailable(f"cannot connect to {host}:{port}: {exc}") from exc
        self.sock.settimeout(timeout)
        self._file = self.sock.makefile("rb")
        self._lock = threading.Lock()

    def roundtrip(self, line: bytes) -> bytes:
        with self._lock:
            try:
                self.sock.sendall(line)
                resp = self._file.readline()
            except socket.timeout as exc:
                raise BackendUnavailable("backend timed out") from exc
            except OSError as exc:
                raise BackendUnavailable(f"socket error: {exc}") from exc
            if not resp:
                raise BackendUnavailable("backend closed the connection")
            return resp

    def close(self) -> None:
        try:
            self._file.close()
            self.sock.close()
        except OSError:
            pass


def _view_payloads(views: Sequence[ViewPixels]) -> tuple[ViewPayload, ...]:
    return tuple(
        ViewPayload(
            view_id=view.id,
            x=view.pixel_rect.x,
            y=view.pixel_rect.y,
            w=view.pixel_rect.w,
            h=view.pixel_rect.h,
            is_global=view.is_global,
            image=ImagePayload.from_raster(pixels),
        )
        for view, pixels in views
    )


class RemoteBackend(GradientBackend):
    """Engine-side client for a backend behind a transport."""

    def __init__(self, transport: Transport):
        self.transport = transport
        self._counter = 0

    def _next_id(self) -> str:
        self._counter += 1
        return f"req{self._counter}"

    def _call(self, request):
        line = encode(request)
        raw = self.transport.roundtrip(line)
        response = decode(raw)
        if isinstance(response, ErrorResponse):
            raise ProtocolError(
                f"backend error [{response.error_type}]: {response.message}", raw=raw
            )
        if response.request_id != request.request_id:
            raise ProtocolError(
                f"response id {response.request_id!r} does not match "
                f"request id {request.request_id!r}",
                raw=raw,
            )
        return response

    def ground(self, views, prompt, objective, tap_layer=None):
        request = GroundRequest(
            request_id=self._next_id(),
            prompt=prompt,
            objective=objective,
            views=_view_payloads(views),
            tap_layer=tap_layer,
        )
        response = self._call(request)
        if not isinstance(response, GroundResponse):
            raise ProtocolError(f"expected ground_response, got {type(response).__name__}")
        if len(response.grids) != len(views):
            raise ProtocolError(
                f"backend returned {len(response.grids)} grids for {len(views)} views"
            )
        out = []
        for (view, _), grid in zip(views, response.grids):
            token_grid = _grid_for_view(view, grid.rows, grid.cols)
            out.append(
                (
                    SaliencyGrid(grid=token_grid, scores=np.array(grid.scores)),
                    grid.summary(objective.decode_step),
                )
            )
        return out

    def answer(self, views, prompt) -> str:
        request = AnswerRequest(
            request_id=self._next_id(), prompt=prompt, views=_view_payloads(views)
        )
        response = self._call(request)
        if not isinstance(response, AnswerResponse):
            raise ProtocolError(f"expected answer_response, got {type(response).__name__}")
        return response.answer

    def ping(self) -> str:
        response = self._call(PingRequest(request_id=self._next_id()))
        if not isinstance(response, PingResponse):
            raise ProtocolError(f"expected ping_response, got {type(response).__name__}")
        return response.backend

    def close(self) -> None:
        self.transport.close()


# -- serving an in-process backend over the wire -------------------------------


def handle_request_line(backend: GradientBackend, line: bytes) -> bytes:
    """Decode one request line, run it, encode the response line.

    Errors are reported in-band as ``error`` messages so a bad request
    never kills the serving loop.
    """
    request_id = "?"
    try:
        message = decode(line)
        request_id = getattr(message, "request_id", "?")
        if isinstance(message, PingRequest):
            return encode(PingResponse(request_id=message.request_id, backend=backend.ping()))
        if isinstance(message, GroundRequest):
            views = _payload_views(message.views)
            results = backend.ground(views, message.prompt, message.objective, message.tap_layer)
            grids = tuple(
                GridPayload(
                    rows=grid.grid.rows,
                    cols=grid.grid.cols,
                    scores=tuple(float(s) for s in grid.scores),
                    entropy=summary.entropy,
                    max_prob=summary.max_prob,
                    vocab=summary.vocab,
                )
                for grid, summary in results
            )
            return encode(GroundResponse(request_id=request_id, grids=grids))
        if isinstance(message, AnswerRequest):
            views = _payload_views(message.views)
            return encode(
                AnswerResponse(request_id=request_id, answer=backend.answer(views, message.prompt))
            )
        raise ProtocolError(f"server cannot handle op for {type(message).__name__}")
    except ProtocolError as exc:
        return encode(ErrorResponse(request_id=request_id, error_type="protocol", message=str(exc)))
    except Exception as exc:  # keep serving: report and carry on
        return encode(
            ErrorResponse(request_id=request_id, error_type=type(exc).__name__, message=str(exc))
        )


def _payload_views(payloads: Sequence[ViewPayload]) -> list[ViewPixels]:
    views = []
    for i, p in enumerate(payloads):
        view = View(
            id=p.view_id,
            pixel_rect=PixelRect(p.x, p.y, p.w, p.h),
            is_global=p.is_global,
            depth=0 if p.is_global else 1,
        )
        views.append((view, p.image.to_raster()))
    return views


def serve_stream(backend: GradientBackend, reader, writer) -> None:
    """Blocking request/response loop over binary line streams."""
    for line in iter(reader.readline, b""):
        if not line.strip():
            continue
        writer.write(handle_request_line(backend, line))
        writer.flush()


def serve_stdio(backend: GradientBackend) -> None:
    serve_stream(backend, sys.stdin.buffer, sys.stdout.buffer)


def serve_tcp(backend: GradientBackend, host: str, port: int, ready_event=None) -> None:
    """Accept loop, one thread per connection (backends are share-safe)."""
    srv = socket.create_server((host, port))
    if ready_event is not None:
        ready_event.set()
    try:
        while True:
            conn, _ = srv.accept()
            threading.Thread(
                target=_serve_conn, args=(backend, conn), daemon=True
            ).start()
    finally:
        srv.close()


def _serve_conn(backend: GradientBackend, conn: socket.socket) -> None:
    with conn:
        reader = conn.makefile("rb")
        writer = conn.makefile("wb")
        serve_stream(backend, reader, writer)


# -- backend construction from a spec string -----------------------------------


def make_backend(
    spec: str,
    toy_config: Optional[ToyModelConfig] = None,
    timeout: float = 60.0,
) -> GradientBackend:
    """Build a backend from its config string.

    Accepted forms: ``toy`` (uses ``toy_config`` or defaults), ``stub``,
    ``tcp:HOST:PORT``, and ``cmd:<command line>`` for a child process.
    """
    if spec == "toy":
        return ToyBackend(toy_config or ToyModelConfig())
    if spec == "stub":
        return StubBackend()
    if spec.startswith("tcp:"):
        _, host, port = spec.split(":", 2)
        return RemoteBackend(TcpTransport(host, int(port), timeout=timeout))
    if spec.startswith("cmd:"):
        return RemoteBackend(ChildProcessTransport(shlex.split(spec[4:]), timeout=timeout))
    raise ValueError(f"unknown backend spec {spec!r}")
