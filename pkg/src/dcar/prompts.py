"""Learnable text context vectors and the visual prompts derived from them."""

from __future__ import annotations

import torch
from torch import nn

from dcar.backbone import Backbone, EmbeddedText


class PromptParams(nn.Module):
    """``V`` holds k text context vectors; ``F`` maps each to a visual prompt."""

    def __init__(self, k: int, d_text: int, d_vision: int):
        super().__init__()
        if k < 1:
            raise ValueError("k must be >= 1")
        self.V = nn.Parameter(torch.zeros(k, d_text))
        self.F_weight = nn.Parameter(torch.zeros(d_vision, d_text))
        self.F_bias = nn.Parameter(torch.zeros(d_vision))

    @property
    def k(self) -> int:
        return self.V.shape[0]


def init_prompts(k: int, seed: int, d_text: int = 32, d_vision: int = 48) -> PromptParams:
    if k < 1:
        raise ValueError("k must be >= 1")
    p = PromptParams(k, d_text, d_vision)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        p.V.copy_(torch.randn(k, d_text, generator=g) * 0.02)
        p.F_weight.copy_(torch.randn(d_vision, d_text, generator=g) * 0.02)
    return p


def project_visual(p: PromptParams) -> torch.Tensor:
    """e_i = F_weight @ v_i + F_bias, stacked as (k, d_vision)."""
    return p.V @ p.F_weight.T + p.F_bias


def assemble_text_prompt(p: PromptParams | None, ids: torch.Tensor, lengths: torch.Tensor,
                         backbone: Backbone, word_scale: torch.Tensor | None = None) -> EmbeddedText:
    return backbone.embed_text(ids, lengths, None if p is None else p.V, word_scale)


def assemble_image_prompt(p: PromptParams | None, images: torch.Tensor, backbone: Backbone) -> torch.Tensor:
    return backbone.embed_image(images, None if p is None else project_visual(p))


def encode_prompted_text(p: PromptParams | None, ids: torch.Tensor, lengths: torch.Tensor,
                         backbone: Backbone) -> torch.Tensor:
    return backbone.encode_text(assemble_text_prompt(p, ids, lengths, backbone))


def encode_prompted_image(p: PromptParams | None, images: torch.Tensor, backbone: Backbone) -> torch.Tensor:
    return backbone.encode_image_sequence(assemble_image_prompt(p, images, backbone))
