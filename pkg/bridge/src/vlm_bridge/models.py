"""Models the bridge can serve.

Both implementations expose the same small surface: ground one view
(gradient saliency at the projected visual embeddings, or at a tapped
decoder layer), answer over a list of views, and report their identity.

``TinyVlm`` is a self-contained deterministic torch transformer:
patchified pixels -> linear projection + 2-D sinusoidal positions ->
decoder blocks over [visual tokens, prompt tokens] -> vocabulary head.
It needs no weights from anywhere, so the sidecar always has a working
model to serve.  ``HfLlava`` wraps a LLaVA-architecture checkpoint
through transformers and hooks the multimodal projector output, the
tensor the saliency objective differentiates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

EOS_ID = 1


@dataclass
class GroundResult:
    scores: np.ndarray  # (rows, cols), non-negative
    entropy: float
    max_prob: float
    vocab: int


class BridgeModel(Protocol):
    def ground_view(
        self,
        image: np.ndarray,
        prompt: str,
        kind: str,
        mass: float,
        decode_step: int,
        tap_layer: Optional[int],
    ) -> GroundResult: ...

    def answer(self, images: Sequence[np.ndarray], prompt: str, max_tokens: int) -> str: ...

    def describe(self) -> str: ...


def hash_tokens(text: str, vocab: int) -> list[int]:
    """FNV-1a word hashing into [2, vocab); ids 0/1 are pad/eos."""
    words = text.split() or ["?"]
    out = []
    for word in words:
        h = 0xCBF29CE484222325
        for b in word.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & ((1 << 64) - 1)
        out.append(2 + h % (vocab - 2))
    return out


def objective_value(logits: torch.Tensor, kind: str, mass: float) -> torch.Tensor:
    """Scalar uncertainty objective on one logit vector, autograd-ready."""
    log_p = F.log_softmax(logits, dim=-1)
    p = log_p.exp()
    if kind == "entropy":
        return -(p * log_p).sum()
    if kind == "max_prob":
        return log_p[int(torch.argmax(p))]
    if kind == "top_p_entropy":
        order = torch.argsort(p, descending=True, stable=True)
        csum = torch.cumsum(p[order], dim=0)
        cut = int(torch.searchsorted(csum.detach(), torch.tensor(mass - 1e-12))) + 1
        nucleus = order[: min(cut, p.numel())]
        q = p[nucleus] / p[nucleus].sum()
        return -(q * torch.log(q.clamp_min(1e-30))).sum()
    raise ValueError(f"unknown objective kind {kind!r}")


def _resize_nearest(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape[:2]
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return image[rows][:, cols]


def to_rgb_float(image: np.ndarray) -> np.ndarray:
    """(h, w[, c]) uint8 -> (h, w, 3) float32 in [0, 1]."""
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    elif image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    return image.astype(np.float32) / 255.0


class _Block(torch.nn.Module):
    def __init__(self, dim: int, heads: int, gen: torch.Generator):
        super().__init__()
        self.heads = heads
        self.ln1 = torch.nn.LayerNorm(dim)
        self.ln2 = torch.nn.LayerNorm(dim)
        self.qkv = _linear(dim, 3 * dim, gen)
        self.proj = _linear(dim, dim, gen)
        self.up = _linear(dim, 4 * dim, gen)
        self.down = _linear(4 * dim, dim, gen)

    def forward(self, x: torch.Tensor, causal_from: int) -> torch.Tensor:
        n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q = q.view(n, h, d // h).transpose(0, 1)
        k = k.view(n, h, d // h).transpose(0, 1)
        v = v.view(n, h, d // h).transpose(0, 1)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(d // h)
        # Visual prefix attends bidirectionally; text positions are causal.
        mask = torch.zeros(n, n, dtype=torch.bool)
        idx = torch.arange(n)
        mask[causal_from:, :] = idx[None, :] > idx[causal_from:, None]
        scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        x = x + self.proj((attn @ v).transpose(0, 1).reshape(n, d))
        x = x + self.down(F.gelu(self.up(self.ln2(x))))
        return x


def _linear(din: int, dout: int, gen: torch.Generator) -> torch.nn.Linear:
    layer = torch.nn.Linear(din, dout)
    with torch.no_grad():
        layer.weight.uniform_(-0.08, 0.08, generator=gen)
        layer.bias.zero_()
    return layer


class TinyVlm(torch.nn.Module):
    """Deterministic multi-layer torch VLM; all weights from the seed."""

    PATCH = 16
    MAX_GRID = 6

    def __init__(self, dim: int = 32, heads: int = 2, layers: int = 4,
                 vocab: int = 128, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.dim = dim
        self.vocab = vocab
        self.seed = seed
        self.patch_proj = _linear(self.PATCH * self.PATCH * 3, dim, gen)
        self.tok_embed = torch.nn.Embedding(vocab, dim)
        with torch.no_grad():
            self.tok_embed.weight.uniform_(-0.08, 0.08, generator=gen)
        self.blocks = torch.nn.ModuleList(_Block(dim, heads, gen) for _ in range(layers))
        self.ln_f = torch.nn.LayerNorm(dim)
        self.head = _linear(dim, vocab, gen)
        self.eval()

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def describe(self) -> str:
        return f"tiny-vlm(dim={self.dim}, layers={self.depth}, seed={self.seed})"

    # -- vision --------------------------------------------------------------

    def grid_dims(self, h: int, w: int) -> tuple[int, int]:
        rows = min(self.MAX_GRID, max(1, round(h / self.PATCH)))
        cols = min(self.MAX_GRID, max(1, round(w / self.PATCH)))
        return rows, cols

    def visual_embeddings(self, image: np.ndarray) -> torch.Tensor:
        """(rows*cols, dim) projected patch embeddings, positions added."""
        rgb = to_rgb_float(image)
        rows, cols = self.grid_dims(*rgb.shape[:2])
        rgb = _resize_nearest(rgb, rows * self.PATCH, cols * self.PATCH)
        patches = (
            torch.from_numpy(rgb.copy())
            .view(rows, self.PATCH, cols, self.PATCH, 3)
            .permute(0, 2, 1, 3, 4)
            .reshape(rows * cols, -1)
        )
        embeds = self.patch_proj(patches)
        return embeds + self._position_code(rows, cols)

    def _position_code(self, rows: int, cols: int) -> torch.Tensor:
        r = (torch.arange(rows, dtype=torch.float32)[:, None] + 0.5) / rows
        c = (torch.arange(cols, dtype=torch.float32)[None, :] + 0.5) / cols
        freqs = torch.arange(1, self.dim // 4 + 1, dtype=torch.float32)
        code = torch.cat(
            [
                torch.sin(2 * math.pi * freqs * r[..., None]).expand(rows, cols, -1),
                torch.cos(2 * math.pi * freqs * r[..., None]).expand(rows, cols, -1),
                torch.sin(2 * math.pi * freqs * c[..., None]).expand(rows, cols, -1),
                torch.cos(2 * math.pi * freqs * c[..., None]).expand(rows, cols, -1),
            ],
            dim=-1,
        )
        return 0.1 * code.reshape(rows * cols, -1)[:, : self.dim]

    # -- language ------------------------------------------------------------

    def _forward_logits(
        self, visual: torch.Tensor, token_ids: list[int], tap_layer: Optional[int] = None
    ):
        """Logits at the last position; optionally the tapped hidden state.

        ``tap_layer = l`` captures the representations ENTERING decoder
        layer l (1-based), so every depth gives a usable gradient; the
        states leaving the last layer cannot influence the final-position
        logits of a causal decoder at other positions.
        """
        text = self.tok_embed(torch.tensor(token_ids, dtype=torch.long))
        x = torch.cat([visual, text], dim=0)
        tapped = None
        for i, block in enumerate(self.blocks, start=1):
            if tap_layer == i:
                tapped = x
            x = block(x, causal_from=visual.shape[0])
        logits = self.head(self.ln_f(x[-1]))
        return logits, tapped

    def _greedy_prefix(self, visual: torch.Tensor, prompt_ids: list[int], steps: int) -> list[int]:
        ids = list(prompt_ids)
        with torch.no_grad():
            for _ in range(steps):
                logits, _ = self._forward_logits(visual, ids)
                ids.append(int(torch.argmax(logits)))
        return ids

    # -- bridge surface --------------------------------------------------------

    def ground_view(self, image, prompt, kind, mass, decode_step, tap_layer) -> GroundResult:
        if tap_layer is not None and not (1 <= tap_layer <= self.depth):
            raise ValueError(f"tap_layer {tap_layer} outside model depth 1..{self.depth}")
        rows, cols = self.grid_dims(*image.shape[:2])
        visual = self.visual_embeddings(image)
        visual.requires_grad_(True)
        ids = self._greedy_prefix(visual.detach(), hash_tokens(prompt, self.vocab), decode_step - 1)
        logits, tapped = self._forward_logits(visual, ids, tap_layer)
        value = objective_value(logits, kind, mass)
        target = visual if tap_layer is None else tapped
        (grad,) = torch.autograd.grad(value, target)
        grad = grad[: rows * cols]  # tapped states include text positions
        scores = grad.norm(dim=-1).detach().numpy().reshape(rows, cols)
        with torch.no_grad():
            p = torch.softmax(logits, dim=-1)
            entropy = float(-(p * torch.log(p.clamp_min(1e-30))).sum())
        return GroundResult(
            scores=scores, entropy=entropy, max_prob=float(p.max()), vocab=self.vocab
        )

    def answer(self, images, prompt, max_tokens) -> str:
        visual = torch.cat([self.visual_embeddings(img) for img in images], dim=0)
        ids = hash_tokens(prompt, self.vocab)
        generated: list[int] = []
        with torch.no_grad():
            for _ in range(max_tokens):
                logits, _ = self._forward_logits(visual, ids + generated)
                token = int(torch.argmax(logits))
                if token == EOS_ID:
                    break
                generated.append(token)
        return " ".join(f"w{t}" for t in generated) or "w?"


class HfLlava:
    """LLaVA-architecture checkpoint behind the same surface.

    Loads through transformers; the saliency gradient is taken at the
    output of the multimodal projector (the projected visual embeddings)
    or, with ``tap_layer``, at that decoder layer's hidden states
    restricted to the image-token positions.
    """

    def __init__(self, model_path: str, device: str = "cpu"):
        from transformers import AutoProcessor, LlavaForConditionalGeneration

        self.processor = AutoProcessor.from_pretrained(model_path)
        self.model = LlavaForConditionalGeneration.from_pretrained(model_path).to(device)
        self.model.eval()
        self.device = device
        self.model_path = model_path
        cfg = self.model.config
        self.image_token_id = cfg.image_token_index
        self.grid_side = cfg.vision_config.image_size // cfg.vision_config.patch_size
        self.depth = cfg.text_config.num_hidden_layers

    def describe(self) -> str:
        return f"hf-llava({self.model_path})"

    def _projector(self):
        model = self.model
        for attr in ("multi_modal_projector",):
            if hasattr(model, attr):
                return getattr(model, attr)
            if hasattr(model, "model") and hasattr(model.model, attr):
                return getattr(model.model, attr)
        raise AttributeError("cannot locate the multimodal projector module")

    def _inputs(self, images, prompt: str):
        from PIL import Image

        pil = [Image.fromarray((to_rgb_float(img) * 255).astype(np.uint8)) for img in images]
        text = " ".join(["<image>"] * len(pil)) + " " + prompt
        return self.processor(images=pil, text=text, return_tensors="pt").to(self.device)

    def ground_view(self, image, prompt, kind, mass, decode_step, tap_layer) -> GroundResult:
        if tap_layer is not None and not (1 <= tap_layer <= self.depth):
            raise ValueError(f"tap_layer {tap_layer} outside model depth 1..{self.depth}")
        inputs = self._inputs([image], prompt)
        input_ids = inputs["input_ids"]
        if decode_step > 1:
            with torch.no_grad():
                out = self.model.generate(
                    **inputs, max_new_tokens=decode_step - 1, do_sample=False
                )
            extra = out[:, input_ids.shape[1]:]
            input_ids = torch.cat([input_ids, extra], dim=1)
            inputs = {**inputs, "input_ids": input_ids,
                      "attention_mask": torch.ones_like(input_ids)}

        captured: dict = {}

        def keep(module, args, output):
            output.retain_grad()
            captured["proj"] = output
            return output

        handle = self._projector().register_forward_hook(keep)
        try:
            out = self.model(**inputs, output_hidden_states=tap_layer is not None)
        finally:
            handle.remove()
        logits = out.logits[0, -1]
        value = objective_value(logits, kind, mass)
        image_positions = (input_ids[0] == self.image_token_id).nonzero().squeeze(-1)
        if tap_layer is None:
            value.backward()
            grad = captured["proj"].grad.reshape(-1, captured["proj"].shape[-1])
        else:
            # hidden_states[l-1] is the input of decoder layer l, so every
            # valid tap carries gradient (the final layer's OUTPUT at image
            # positions cannot reach the last-position logits).
            hidden = out.hidden_states[tap_layer - 1]
            (full,) = torch.autograd.grad(value, hidden)
            grad = full[0, image_positions]
        norms = grad.norm(dim=-1).detach().cpu().numpy()
        side = self.grid_side
        scores = norms[: side * side].reshape(side, side)
        with torch.no_grad():
            p = torch.softmax(logits, dim=-1)
            entropy = float(-(p * torch.log(p.clamp_min(1e-30))).sum())
        return GroundResult(
            scores=scores, entropy=entropy, max_prob=float(p.max()),
            vocab=int(logits.shape[-1]),
        )

    def answer(self, images, prompt, max_tokens) -> str:
        inputs = self._inputs(images, prompt)
        with torch.no_grad():
            out = self.model.generate(**inputs, max_new_tokens=max_tokens, do_sample=False)
        new_tokens = out[0, inputs["input_ids"].shape[1]:]
        return self.processor.tokenizer.decode(new_tokens, skip_special_tokens=True).strip() or "?"


def load_model(spec: str, device: str = "cpu") -> BridgeModel:
    """``tiny``, ``tiny:SEED``, or ``hf:<path-or-id>``."""
    if spec == "tiny":
        return TinyVlm()
    if spec.startswith("tiny:"):
        return TinyVlm(seed=int(spec.split(":", 1)[1]))
    if spec.startswith("hf:"):
        return HfLlava(spec[3:], device=device)
    raise ValueError(f"unknown model spec {spec!r}")
