"""Bridge configuration."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

OPEN_ENDED_SUFFIX = "Answer the question using a single word or phrase."
MULTIPLE_CHOICE_SUFFIX = "Answer with the option's letter from the given choices directly."

PROMPT_TEMPLATES = {"none", "open", "multiple_choice"}


@dataclass(frozen=True)
class BridgeConfig:
    """How the sidecar loads and drives its model.

    ``model`` is ``tiny`` (the built-in deterministic torch VLM,
    optionally ``tiny:SEED``) or ``hf:<path-or-id>`` for a
    LLaVA-architecture checkpoint loaded through transformers.

    ``prompt_template`` appends the standard open-ended or
    multiple-choice answer instruction to incoming prompts when the
    client sends bare questions; ``none`` (default) passes prompts
    through untouched, which is what the engine's eval harness expects
    since it builds full prompts itself.
    """

    model: str = "tiny"
    device: str = "cpu"
    tap_layer: Optional[int] = None
    prompt_template: str = "none"
    max_answer_tokens: int = 8

    def __post_init__(self) -> None:
        if self.prompt_template not in PROMPT_TEMPLATES:
            raise ValueError(f"unknown prompt_template {self.prompt_template!r}")
        if self.max_answer_tokens < 1:
            raise ValueError("max_answer_tokens must be >= 1")
        if self.tap_layer is not None and self.tap_layer < 1:
            raise ValueError("tap_layer must be >= 1 when set")

    def apply_template(self, prompt: str) -> str:
        if self.prompt_template == "open" and OPEN_ENDED_SUFFIX not in prompt:
            return f"{prompt}\n{OPEN_ENDED_SUFFIX}"
        if self.prompt_template == "multiple_choice" and MULTIPLE_CHOICE_SUFFIX not in prompt:
            return f"{prompt}\n{MULTIPLE_CHOICE_SUFFIX}"
        return prompt
