"""Blank-image token relevance weights and weighted caption encoding.

A caption word's relevance to its image is measured as the drop in
exp-cosine similarity when the image is replaced by an all-zero one:
``|score(tok, blank) - score(tok, img)|``. The magnitudes are normalised
to sum to one and used to scale the word embeddings before re-encoding.
Weights are recomputed on every forward pass and carry no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from dcar.backbone import Backbone, TokenSequence, batch_ids, score
from dcar.prompts import PromptParams, assemble_text_prompt, encode_prompted_image

FALLBACK_EPS = 1e-8


@dataclass
class TokenWeights:
    raw: torch.Tensor
    normalized: torch.Tensor
    uniform_fallback: bool

    def __len__(self) -> int:
        return self.raw.shape[0]


def make_blank_image(image_size: int = 32, channels: int = 3) -> torch.Tensor:
    return torch.zeros(image_size, image_size, channels)


def delta_s(token_feat: torch.Tensor, img: torch.Tensor, blank: torch.Tensor) -> torch.Tensor:
    return score(token_feat, blank) - score(token_feat, img)


def normalize_weights(raw: torch.Tensor, mask: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-normalise non-negative ``raw`` (B, n) over ``mask``.

    Rows whose masked sum is below ``FALLBACK_EPS`` become uniform over their
    words. Returns ``(normalized, fallback)``.
    """
    if mask is None:
        mask = torch.ones_like(raw, dtype=torch.bool)
    raw = torch.where(mask, raw, torch.zeros_like(raw))
    total = raw.sum(-1, keepdim=True)
    count = mask.sum(-1, keepdim=True).clamp(min=1).to(raw.dtype)
    fallback = total < FALLBACK_EPS
    uniform = mask.to(raw.dtype) / count
    safe = torch.where(fallback, torch.ones_like(total), total)
    return torch.where(fallback, uniform, raw / safe), fallback.squeeze(-1)


@torch.no_grad()
def batch_token_weights(backbone: Backbone, prompts: PromptParams | None, ids: torch.Tensor,
                        lengths: torch.Tensor, images: torch.Tensor,
                        image_embs: torch.Tensor | None = None,
                        blank_emb: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Weights for a batch of (caption, image) pairs.

    Returns ``(raw, normalized, fallback, mask)``; ``raw``/``normalized`` are
    (B, n_max) with zeros past each caption's last word.
    """
    if bool((lengths <= 2).any()):
        raise ValueError("token weighting needs at least one caption word")
    feats, mask = backbone.token_features(assemble_text_prompt(prompts, ids, lengths, backbone))
    if image_embs is None:
        image_embs = encode_prompted_image(prompts, images, backbone)
    if blank_emb is None:
        c = backbone.cfg
        blank = make_blank_image(c.image_size, c.channels).to(feats.dtype)
        blank_emb = encode_prompted_image(prompts, blank, backbone)[0]
    ds = delta_s(feats, image_embs.detach()[:, None, :], blank_emb.detach()[None, None, :])
    raw = torch.where(mask, ds.abs(), torch.zeros_like(ds))
    normalized, fallback = normalize_weights(raw, mask)
    return raw, normalized, fallback, mask


def token_weights(backbone: Backbone, prompts: PromptParams | None, seq: TokenSequence,
                  image: torch.Tensor) -> TokenWeights:
    if seq.n_words < 1:
        raise ValueError("token weighting needs at least one caption word")
    ids, lens = batch_ids([seq])
    raw, norm, fb, _ = batch_token_weights(backbone, prompts, ids, lens, image[None] if image.dim() == 3 else image)
    n = seq.n_words
    return TokenWeights(raw=raw[0, :n], normalized=norm[0, :n], uniform_fallback=bool(fb[0]))


def encode_weighted_batch(backbone: Backbone, prompts: PromptParams | None, ids: torch.Tensor,
                          lengths: torch.Tensor, normalized: torch.Tensor) -> torch.Tensor:
    """Encode captions with word embeddings scaled by ``normalized`` (B, n_max)."""
    seq = assemble_text_prompt(prompts, ids, lengths, backbone, word_scale=normalized.detach())
    return backbone.encode_text(seq)


def encode_weighted_text(backbone: Backbone, prompts: PromptParams | None, seq: TokenSequence,
                         weights: TokenWeights) -> torch.Tensor:
    if len(weights) != seq.n_words:
        raise ValueError(f"{len(weights)} weights for a caption of {seq.n_words} words")
    ids, lens = batch_ids([seq])
    return encode_weighted_batch(backbone, prompts, ids, lens, weights.normalized[None])[0]
