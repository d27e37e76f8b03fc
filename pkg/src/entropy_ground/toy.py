"""A tiny deterministic differentiable vision-language model.

Small enough that its reverse-mode gradients are hand-written and checkable
by finite differences, but rich enough that saliency depends on both image
content and the prompt: patch statistics -> seeded linear projection ->
one softmax cross-attention layer queried by a prompt summary -> linear
vocabulary head.

Reproducibility contract (bit-identical weights from the seed, in any
language): weights come from a single splitmix64 stream seeded with
``config.seed``.  Each draw advances the state by 0x9E3779B97F4A7C15
(mod 2^64) and mixes it with the splitmix64 finalizer; the top 53 bits
form u = (z >> 11) / 2^53 in [0, 1), and the weight is -0.1 + 0.2 u.
Draw order: token embedding table (vocab x embed_dim, row-major), patch
projection (embed_dim x 12, row-major), head matrix (vocab x embed_dim,
row-major), head bias (vocab).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import PixelRect, SaliencyGrid, TokenGrid
from .imaging import RasterImage, to_grayscale
from .objectives import NextTokenSummary, ObjectiveConfig, objective_seed, softmax

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Patch features: 4 intensity stats + 8 sinusoidal position components.
FEATURE_DIM = 12


class SplitMix64:
    """splitmix64 stream; the documented weight-initialization PRNG."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return (z ^ (z >> 31)) & _MASK64

    def next_weight(self) -> float:
        u = (self.next_u64() >> 11) / float(1 << 53)
        return -0.1 + 0.2 * u

    def weights(self, *shape: int) -> np.ndarray:
        n = int(np.prod(shape))
        return np.array([self.next_weight() for _ in range(n)], dtype=np.float64).reshape(shape)


@dataclass(frozen=True)
class ToyModelConfig:
    embed_dim: int = 16
    vocab: int = 64
    grid_rows: int = 8
    grid_cols: int = 8
    seed: int = 0
    attention_mask: Optional[frozenset[int]] = None

    def __post_init__(self) -> None:
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ValueError("grid dims must be >= 1")
        if self.attention_mask is not None:
            object.__setattr__(
                self, "attention_mask", frozenset(int(i) for i in self.attention_mask)
            )

    def to_record(self) -> dict:
        rec = {
            "embed_dim": self.embed_dim,
            "vocab": self.vocab,
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "seed": self.seed,
        }
        if self.attention_mask is not None:
            rec["attention_mask"] = sorted(self.attention_mask)
        return rec

    @staticmethod
    def from_record(rec: dict) -> "ToyModelConfig":
        mask = rec.get("attention_mask")
        return ToyModelConfig(
            embed_dim=int(rec.get("embed_dim", 16)),
            vocab=int(rec.get("vocab", 64)),
            grid_rows=int(rec.get("grid_rows", 8)),
            grid_cols=int(rec.get("grid_cols", 8)),
            seed=int(rec.get("seed", 0)),
            attention_mask=None if mask is None else frozenset(int(i) for i in mask),
        )


@dataclass(frozen=True)
class VisualEmbeddings:
    grid: TokenGrid
    vectors: np.ndarray  # (rows*cols, embed_dim)

    def __post_init__(self) -> None:
        vectors = np.asarray(self.vectors, dtype=np.float64)
        vectors.flags.writeable = False
        object.__setattr__(self, "vectors", vectors)
        if vectors.ndim != 2 or vectors.shape[0] != self.grid.size:
            raise ValueError(f"expected ({self.grid.size}, d) vectors, got {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("embeddings must be finite")


@dataclass(frozen=True)
class GradientField:
    grid: TokenGrid
    vectors: np.ndarray  # (rows*cols, embed_dim), d objective / d embedding

    def __post_init__(self) -> None:
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != self.grid.size:
            raise ValueError(f"gradient field shape {vectors.shape} does not match grid")
        object.__setattr__(self, "vectors", vectors)

    def norms(self) -> np.ndarray:
        return np.sqrt((self.vectors**2).sum(axis=1))


@dataclass(frozen=True)
class SaliencyResult:
    saliency: SaliencyGrid
    summary: NextTokenSummary
    field: GradientField
    objective_value: float


def position_code(row: int, col: int, rows: int, cols: int) -> np.ndarray:
    """Fixed 8-dim sinusoidal code of the token's fractional grid position."""
    u = (row + 0.5) / rows
    v = (col + 0.5) / cols
    return np.array(
        [
            math.sin(2 * math.pi * u), math.cos(2 * math.pi * u),
            math.sin(2 * math.pi * v), math.cos(2 * math.pi * v),
            math.sin(4 * math.pi * u), math.cos(4 * math.pi * u),
            math.sin(4 * math.pi * v), math.cos(4 * math.pi * v),
        ],
        dtype=np.float64,
    )


def patch_features(image: RasterImage, rows: int, cols: int) -> np.ndarray:
    """(rows*cols, 12) features: mean gray + per-channel means + position code.

    Patch extents use the integer partition floor(c*W/cols), matching the
    token-to-pixel mapping in :mod:`entropy_ground.core`.
    """
    arr = image.as_array().astype(np.float64) / 255.0
    gray = to_grayscale(image) / 255.0
    feats = np.zeros((rows * cols, FEATURE_DIM), dtype=np.float64)
    for r in range(rows):
        y1, y2 = (r * image.height) // rows, ((r + 1) * image.height) // rows
        for c in range(cols):
            x1, x2 = (c * image.width) // cols, ((c + 1) * image.width) // cols
            patch = arr[y1:y2, x1:x2, :]
            means = patch.mean(axis=(0, 1))
            if image.channels == 1:
                means = np.repeat(means, 3)
            i = r * cols + c
            feats[i, 0] = gray[y1:y2, x1:x2].mean()
            feats[i, 1:4] = means
            feats[i, 4:] = position_code(r, c, rows, cols)
    return feats


def _masked_softmax(scores: np.ndarray, attend: np.ndarray) -> np.ndarray:
    """Softmax over the attendable entries only; zeros elsewhere."""
    out = np.zeros_like(scores)
    sub = scores[attend]
    e = np.exp(sub - sub.max())
    out[attend] = e / e.sum()
    return out


def _cell_of(p: int, boundaries: np.ndarray) -> int:
    """Index of the half-open cell [b_k, b_{k+1}) containing pixel p."""
    return int(np.searchsorted(boundaries, p, side="right")) - 1


class ToyModel:
    """Weights plus forward/saliency; treat as immutable after construction."""

    def __init__(self, config: ToyModelConfig):
        self.config = config
        rng = SplitMix64(config.seed)
        self.token_table = rng.weights(config.vocab, config.embed_dim)
        self.w_proj = rng.weights(config.embed_dim, FEATURE_DIM)
        self.w_head = rng.weights(config.vocab, config.embed_dim)
        self.b_head = rng.weights(config.vocab)

    # -- embedding ---------------------------------------------------------

    def embed_image(
        self, image: RasterImage, view_rect: PixelRect | None = None
    ) -> VisualEmbeddings:
        """Project per-patch statistics + position codes to the embed space.

        ``view_rect`` is where this image sits in the original picture; it
        defaults to the image's own extent (a global view).
        """
        cfg = self.config
        if image.width < cfg.grid_cols or image.height < cfg.grid_rows:
            raise ValueError(
                f"image {image.width}x{image.height} smaller than "
                f"{cfg.grid_rows}x{cfg.grid_cols} token grid"
            )
        if view_rect is None:
            view_rect = image.rect
        if (view_rect.w, view_rect.h) != (image.width, image.height):
            raise ValueError("view_rect extent must match the image dimensions")
        feats = patch_features(image, cfg.grid_rows, cfg.grid_cols)
        grid = TokenGrid(
            rows=cfg.grid_rows,
            cols=cfg.grid_cols,
            patch_px=max(1, round(min(view_rect.w / cfg.grid_cols, view_rect.h / cfg.grid_rows))),
            view_rect=view_rect,
        )
        return VisualEmbeddings(grid=grid, vectors=feats @ self.w_proj.T)

    # -- attention restriction ---------------------------------------------

    def attendable(self, grid: TokenGrid, original: PixelRect | None = None) -> np.ndarray:
        """Boolean vector: which tokens of ``grid`` the model may attend to.

        ``attention_mask`` names token indices on the model's native grid
        over the original image.  A token of any other grid (a crop view)
        is attendable iff its pixel footprint lies inside the union of the
        masked native tokens' footprints; on the native grid itself this
        reduces to plain index membership.  Unattendable tokens have no
        path to the logits and therefore exactly zero saliency.
        """
        if self.config.attention_mask is None:
            return np.ones(grid.size, dtype=bool)
        if original is None:
            original = grid.view_rect
        cfg = self.config
        row_bounds = np.array(
            [original.y + (r * original.h) // cfg.grid_rows for r in range(cfg.grid_rows + 1)]
        )
        col_bounds = np.array(
            [original.x + (c * original.w) // cfg.grid_cols for c in range(cfg.grid_cols + 1)]
        )
        mask = self.config.attention_mask
        out = np.zeros(grid.size, dtype=bool)
        for i in range(grid.size):
            rect = grid.token_rect(i)
            r_first = _cell_of(rect.y, row_bounds)
            r_last = _cell_of(rect.y2 - 1, row_bounds)
            c_first = _cell_of(rect.x, col_bounds)
            c_last = _cell_of(rect.x2 - 1, col_bounds)
            if min(r_first, c_first) < 0 or r_last >= cfg.grid_rows or c_last >= cfg.grid_cols:
                continue  # sticks out of the original image: never attendable
            out[i] = all(
                (r * cfg.grid_cols + c) in mask
                for r in range(r_first, r_last + 1)
                for c in range(c_first, c_last + 1)
            )
        return out

    # -- forward -------------------------------------------------------------

    def _summary_rows(self, prompt_tokens: Sequence[int]) -> list[np.ndarray]:
        if len(prompt_tokens) == 0:
            raise ValueError("prompt must contain at least one token")
        return [self.token_table[int(t) % self.config.vocab] for t in prompt_tokens]

    def _attend(self, query: np.ndarray, vectors: np.ndarray, attend: np.ndarray):
        if not attend.any():
            # Nothing to look at: empty context, logits reduce to the bias.
            return np.zeros(vectors.shape[0]), self.b_head.copy()
        scores = (vectors @ query) / math.sqrt(self.config.embed_dim)
        alphas = _masked_softmax(scores, attend)
        logits = self.w_head @ (alphas @ vectors) + self.b_head
        return alphas, logits

    def _unroll(self, embeddings, prompt_tokens, decode_step, original):
        """Greedy decode to ``decode_step``; returns the final step's pieces."""
        if decode_step < 1:
            raise ValueError("decode_step must be >= 1")
        summary_rows = self._summary_rows(prompt_tokens)
        attend = self.attendable(embeddings.grid, original)
        query = alphas = logits = None
        for _ in range(decode_step):
            query = np.mean(summary_rows, axis=0)
            alphas, logits = self._attend(query, embeddings.vectors, attend)
            # Greedy continuation; np.argmax breaks ties to the lowest index.
            summary_rows.append(self.token_table[int(np.argmax(logits))])
        return query, alphas, logits, attend

    def forward(
        self,
        embeddings: VisualEmbeddings,
        prompt_tokens: Sequence[int],
        decode_step: int = 1,
        original: PixelRect | None = None,
    ) -> NextTokenSummary:
        """Next-token distribution at ``decode_step`` (greedy unroll past 1)."""
        _, _, logits, _ = self._unroll(embeddings, prompt_tokens, decode_step, original)
        return NextTokenSummary.from_probs(softmax(logits), decode_step, logits=logits)

    def answer_token(
        self,
        views: Sequence[VisualEmbeddings],
        prompt_tokens: Sequence[int],
        original: PixelRect | None = None,
    ) -> int:
        """Greedy answer over the concatenated visual tokens of all views.

        The stand-in for answer generation: one attention pass over the
        union of every view's tokens, argmax of the resulting logits.
        """
        if not views:
            raise ValueError("need at least one view to answer")
        summary_rows = self._summary_rows(prompt_tokens)
        vectors = np.concatenate([v.vectors for v in views], axis=0)
        attend = np.concatenate([self.attendable(v.grid, original) for v in views])
        query = np.mean(summary_rows, axis=0)
        _, logits = self._attend(query, vectors, attend)
        return int(np.argmax(logits))

    # -- reverse mode --------------------------------------------------------

    def saliency(
        self,
        embeddings: VisualEmbeddings,
        prompt_tokens: Sequence[int],
        objective: ObjectiveConfig,
        original: PixelRect | None = None,
    ) -> SaliencyResult:
        """Objective gradient at every visual embedding, reduced to L2 norms.

        The greedy token choices of steps before ``decode_step`` are
        discrete, so the only differentiable path from the embeddings to
        the objective is the final step's attention; its backward pass is
        written out explicitly below.
        """
        query, alphas, logits, attend = self._unroll(
            embeddings, prompt_tokens, objective.decode_step, original
        )
        value, g_logits = objective_seed(objective, logits)

        vectors = embeddings.vectors
        grads = np.zeros_like(vectors)
        if attend.any():
            g_context = self.w_head.T @ g_logits
            # context = sum_i alpha_i v_i with e_i = (q . v_i)/sqrt(d):
            # dL/dv_i = alpha_i dL/dc + softmax-backward(e)_i * q/sqrt(d).
            g_alpha = vectors @ g_context
            weighted = float((alphas * g_alpha).sum())
            g_scores = alphas * (g_alpha - weighted)
            grads = alphas[:, None] * g_context[None, :] + np.outer(
                g_scores, query / math.sqrt(self.config.embed_dim)
            )
            grads[~attend] = 0.0

        field = GradientField(grid=embeddings.grid, vectors=grads)
        return SaliencyResult(
            saliency=SaliencyGrid(grid=embeddings.grid, scores=field.norms()),
            summary=NextTokenSummary.from_probs(
                softmax(logits), objective.decode_step, logits=logits
            ),
            field=field,
            objective_value=value,
        )


def hash_prompt(text: str, vocab: int) -> list[int]:
    """Stable whitespace-word FNV-1a hashing; the toy stand-in for a tokenizer."""
    words = text.split()
    if not words:
        raise ValueError("prompt text is empty")
    tokens = []
    for word in words:
        h = 0xCBF29CE484222325
        for b in word.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & _MASK64
        tokens.append(h % vocab)
    return tokens
