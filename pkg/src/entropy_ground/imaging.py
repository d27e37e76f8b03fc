"""Raster I/O (binary PGM/PPM), exact cropping, and heatmap rendering.

Only binary portable pixmaps with maxval 255 are supported: they are
bit-exact, trivially diffable, and writable from any language.  Writing
uses the canonical header ``P5\\n<w> <h>\\n255\\n`` (one whitespace byte
after the maxval), so write(read(x)) == x for canonical files and
read(write(img)) == img always.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import PixelRect


class PixmapFormatError(Exception):
    """Malformed or truncated pixmap; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class RasterImage:
    """8-bit row-major raster, grayscale (1 channel) or RGB (3 channels)."""

    width: int
    height: int
    channels: int
    samples: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return (
            (self.width, self.height, self.channels)
            == (other.width, other.height, other.channels)
            and self.samples.tobytes() == other.samples.tobytes()
        )

    def __post_init__(self) -> None:
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        samples = np.asarray(self.samples, dtype=np.uint8)
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        expected = self.width * self.height * self.channels
        if samples.shape != (expected,):
            raise ValueError(
                f"expected {expected} samples for "
                f"{self.width}x{self.height}x{self.channels}, got {samples.shape}"
            )

    def as_array(self) -> np.ndarray:
        """(height, width, channels) view of the samples."""
        return self.samples.reshape(self.height, self.width, self.channels)

    @property
    def rect(self) -> PixelRect:
        return PixelRect(0, 0, self.width, self.height)


def from_array(arr: np.ndarray) -> RasterImage:
    """Build a RasterImage from an (h, w) or (h, w, c) uint8-compatible array."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"cannot interpret array of shape {arr.shape} as a raster")
    h, w, c = arr.shape
    return RasterImage(w, h, c, np.ascontiguousarray(arr, dtype=np.uint8).ravel())


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # Skips whitespace and '#' comments, then reads one header token.
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise PixmapFormatError("unexpected end of header", pos)
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def decode_pixmap(data: bytes) -> RasterImage:
    """Parse binary PGM (P5) or PPM (P6) bytes with maxval 255."""
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise PixmapFormatError(f"unsupported magic {magic!r}", 0)
    channels = 1 if magic == b"P5" else 3
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise PixmapFormatError(f"non-numeric header field {tok!r}", pos - len(tok))
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PixmapFormatError(f"invalid dimensions {width}x{height}", 0)
    if maxval != 255:
        raise PixmapFormatError(f"only maxval 255 is supported, got {maxval}", pos)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PixmapFormatError("missing whitespace after maxval", pos)
    pos += 1  # exactly one whitespace byte separates header and payload
    expected = width * height * channels
    payload = data[pos : pos + expected]
    if len(payload) != expected:
        raise PixmapFormatError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}",
            pos + len(payload),
        )
    return RasterImage(width, height, channels, np.frombuffer(payload, dtype=np.uint8))


def encode_pixmap(image: RasterImage) -> bytes:
    """Serialize to canonical binary PGM/PPM bytes."""
    magic = b"P5" if image.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (image.width, image.height)
    return header + image.samples.tobytes()


def read_pixmap(path: str | Path) -> RasterImage:
    return decode_pixmap(Path(path).read_bytes())


def write_pixmap(image: RasterImage, path: str | Path) -> None:
    Path(path).write_bytes(encode_pixmap(image))


def crop(image: RasterImage, rect: PixelRect) -> RasterImage:
    """Exact pixel copy of the half-open rect; never resamples."""
    if rect.area == 0:
        raise ValueError("crop rect must have positive area")
    if not image.rect.contains(rect):
        raise ValueError(f"crop rect {rect} escapes image {image.width}x{image.height}")
    arr = image.as_array()[rect.y : rect.y2, rect.x : rect.x2, :]
    return from_array(arr)


def to_grayscale(image: RasterImage) -> np.ndarray:
    """(h, w) float64 gray values in [0, 255]; RGB uses the channel mean."""
    arr = image.as_array().astype(np.float64)
    return arr[:, :, 0] if image.channels == 1 else arr.mean(axis=2)


def render_heatmap(
    saliency_scores: np.ndarray,
    rows: int,
    cols: int,
    out_w: int,
    out_h: int,
) -> RasterImage:
    """Min-max normalized grayscale map, nearest-neighbor upscaled.

    A constant map renders mid-gray (128) rather than dividing by zero.
    """
    scores = np.asarray(saliency_scores, dtype=np.float64).reshape(rows, cols)
    lo, hi = float(scores.min()), float(scores.max())
    if hi - lo < 1e-12:
        norm = np.full((rows, cols), 128.0)
    else:
        norm = (scores - lo) / (hi - lo) * 255.0
    # Nearest-neighbor upscale keeps token boundaries visible.
    row_idx = (np.arange(out_h) * rows) // out_h
    col_idx = (np.arange(out_w) * cols) // out_w
    upscaled = norm[np.ix_(row_idx, col_idx)]
    return from_array(np.round(upscaled).astype(np.uint8))


def render_saliency(saliency, base: RasterImage | None = None, outline_rects: Sequence[PixelRect] = ()) -> RasterImage:
    """Render a SaliencyGrid at its view's pixel dimensions.

    Without a base this is the bare heatmap; with one it is the blended
    overlay. ``outline_rects`` are in original-image coordinates and get
    translated into the view.
    """
    view = saliency.grid.view_rect
    heat = render_heatmap(
        saliency.scores, saliency.grid.rows, saliency.grid.cols, view.w, view.h
    )
    if base is None:
        return heat
    local = [PixelRect(r.x - view.x, r.y - view.y, r.w, r.h) for r in outline_rects]
    return render_overlay(heat, base, local)


def render_overlay(
    heat: RasterImage,
    base: RasterImage,
    outline_rects: Sequence[PixelRect] = (),
) -> RasterImage:
    """0.5 alpha blend of heatmap over the base view plus proposal outlines.

    ``outline_rects`` are given in base-local coordinates; outlines are
    drawn one pixel wide in red, so the output is always RGB.
    """
    if (heat.width, heat.height) != (base.width, base.height):
        raise ValueError("heatmap and base view dimensions must match")
    heat_rgb = np.repeat(to_grayscale(heat)[:, :, None], 3, axis=2)
    base_arr = base.as_array().astype(np.float64)
    if base.channels == 1:
        base_arr = np.repeat(base_arr, 3, axis=2)
    blended = np.floor((heat_rgb + base_arr) / 2.0).astype(np.uint8)
    for rect in outline_rects:
        r = rect.intersect(base.rect)
        if r.area == 0:
            continue
        blended[r.y, r.x : r.x2] = (255, 0, 0)
        blended[r.y2 - 1, r.x : r.x2] = (255, 0, 0)
        blended[r.y : r.y2, r.x] = (255, 0, 0)
        blended[r.y : r.y2, r.x2 - 1] = (255, 0, 0)
    return from_array(blended)
