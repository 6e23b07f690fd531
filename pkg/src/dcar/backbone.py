"""Miniature CLIP-style dual encoder.

Text tower: token embeddings + fixed sinusoidal positions, causal pre-LN
transformer, pooled at the EOS position. Vision tower: 4x4 patch embedding,
learned CLS token, bidirectional pre-LN transformer, pooled at CLS. Both
pooled states are linearly projected into a shared joint space and
L2-normalised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

BOS, EOS, PAD, UNK = 0, 1, 2, 3
SPECIALS = ("<bos>", "<eos>", "<pad>", "<unk>")
N_SPECIAL = len(SPECIALS)


class Vocab:
    """Word-level vocabulary; ids 0..3 are reserved for BOS/EOS/PAD/UNK."""

    def __init__(self, words: Iterable[str]):
        self.words: list[str] = []
        self.token_to_id: dict[str, int] = {}
        for w in words:
            w = w.lower()
            if w in self.token_to_id or w in SPECIALS:
                continue
            self.token_to_id[w] = N_SPECIAL + len(self.words)
            self.words.append(w)

    def __len__(self) -> int:
        return N_SPECIAL + len(self.words)

    def __getitem__(self, word: str) -> int:
        return self.token_to_id.get(word, UNK)

    def id_to_token(self, i: int) -> str:
        return SPECIALS[i] if i < N_SPECIAL else self.words[i - N_SPECIAL]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        seen = sorted({w for t in texts for w in t.lower().split()})
        return cls(seen)

    def save(self, path: Path) -> None:
        path.write_text("".join(w + "\n" for w in self.words), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocab":
        return cls(path.read_text(encoding="utf-8").splitlines())


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    content_len: int  # non-PAD tokens, BOS and EOS included

    @property
    def n_words(self) -> int:
        return self.content_len - 2

    @property
    def eos_index(self) -> int:
        return self.content_len - 1


def tokenize(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    words = text.lower().split()[: max_len - 2]
    ids = [BOS] + [vocab[w] for w in words] + [EOS]
    n = len(ids)
    return TokenSequence(ids=tuple(ids + [PAD] * (max_len - n)), content_len=n)


def batch_ids(seqs: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack sequences into an id tensor (B, L) and content lengths (B,)."""
    ids = torch.tensor([s.ids for s in seqs], dtype=torch.long)
    lens = torch.tensor([s.content_len for s in seqs], dtype=torch.long)
    return ids, lens


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int
    d_text: int = 32
    d_vision: int = 48
    d_joint: int = 32
    text_layers: int = 2
    vision_layers: int = 2
    heads: int = 4
    patch: int = 4
    image_size: int = 32
    channels: int = 3
    max_len: int = 32
    max_prompts: int = 16

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def as_list(self) -> list[int]:
        return [self.vocab_size, self.d_text, self.d_vision, self.d_joint, self.text_layers,
                self.vision_layers, self.heads, self.patch, self.image_size, self.channels,
                self.max_len, self.max_prompts]

    @classmethod
    def from_list(cls, values: Sequence[int]) -> "BackboneConfig":
        return cls(*[int(v) for v in values])


EMBED_STD = 0.02
POS_SCALE = 0.002


def sinusoidal(n: int, d: int, scale: float = POS_SCALE) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    inv = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * inv)
    pe[:, 1::2] = torch.cos(pos * inv)
    return (pe * scale).float()


class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, 4 * width)
        self.fc2 = nn.Linear(4 * width, width)

    def forward(self, x: torch.Tensor, causal: bool) -> torch.Tensor:
        b, n, w = x.shape
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q, k, v = (t.view(b, n, self.heads, w // self.heads).transpose(1, 2) for t in (q, k, v))
        a = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        x = x + self.out(a.transpose(1, 2).reshape(b, n, w))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class Transformer(nn.Module):
    def __init__(self, width: int, layers: int, heads: int, causal: bool):
        super().__init__()
        self.causal = causal
        self.blocks = nn.ModuleList(Block(width, heads) for _ in range(layers))
        self.ln_final = nn.LayerNorm(width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x, self.causal)
        return self.ln_final(x)


@dataclass
class EmbeddedText:
    """A text batch after embedding lookup, prompt prefixing and positions.

    ``x`` is (B, L, d_text). Caption words occupy positions
    ``n_prompts + 1 .. n_prompts + n_words`` (BOS sits at ``n_prompts``).
    """

    x: torch.Tensor
    n_prompts: int
    lengths: torch.Tensor  # content lengths (BOS/EOS included), shape (B,)

    @property
    def eos_positions(self) -> torch.Tensor:
        return self.n_prompts + self.lengths - 1

    def word_mask(self) -> torch.Tensor:
        """(B, L) mask of caption-word positions (prompts, BOS, EOS, PAD excluded)."""
        pos = torch.arange(self.x.shape[1])[None, :]
        first = self.n_prompts + 1
        return (pos >= first) & (pos < (self.eos_positions[:, None]))


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Parameter(torch.randn(cfg.vocab_size, cfg.d_text) * EMBED_STD)
        self.register_buffer("text_pos", sinusoidal(cfg.max_len, cfg.d_text))
        self.text = Transformer(cfg.d_text, cfg.text_layers, cfg.heads, causal=True)
        self.text_proj = nn.Parameter(torch.randn(cfg.d_text, cfg.d_joint) * cfg.d_text ** -0.5)

        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.d_vision, bias=False)
        nn.init.normal_(self.patch_embed.weight, std=EMBED_STD)
        self.cls = nn.Parameter(torch.randn(cfg.d_vision) * EMBED_STD)
        self.register_buffer("vision_pos", sinusoidal(1 + cfg.n_patches, cfg.d_vision))
        self.vision = Transformer(cfg.d_vision, cfg.vision_layers, cfg.heads, causal=False)
        self.vision_proj = nn.Parameter(torch.randn(cfg.d_vision, cfg.d_joint) * cfg.d_vision ** -0.5)
        self.frozen = False

    @classmethod
    def create(cls, cfg: BackboneConfig, seed: int) -> "Backbone":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(cfg)

    def freeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self.eval()

    def check_finite(self) -> None:
        for name, t in self.state_dict().items():
            if not torch.isfinite(t).all():
                raise FloatingPointError(f"non-finite backbone tensor {name}")

    # -- text ---------------------------------------------------------------

    def embed_text(self, ids: torch.Tensor, lengths: torch.Tensor,
                   context: torch.Tensor | None = None,
                   word_scale: torch.Tensor | None = None) -> EmbeddedText:
        """Look up tokens, add positions, then prefix ``context`` (k, d_text).

        ``word_scale`` (B, n_max) multiplies caption-word embeddings (not BOS,
        EOS or prompts) before positions are added.
        """
        tok = self.token_embedding[ids]
        if word_scale is not None:
            scale = torch.ones(ids.shape, dtype=tok.dtype)
            n = word_scale.shape[1]
            scale[:, 1:1 + n] = word_scale.to(tok.dtype)
            # word_scale may be shorter than the row; positions past the words keep scale 1
            pos = torch.arange(ids.shape[1])[None, :]
            keep = (pos >= 1) & (pos < lengths[:, None] - 1)
            scale = torch.where(keep, scale, torch.ones_like(scale))
            tok = tok * scale[..., None]
        n = tok.shape[1]
        if n > self.text_pos.shape[0]:
            raise ValueError(f"text sequence of length {n} exceeds positional table {self.text_pos.shape[0]}")
        tok = tok + self.text_pos[:n].to(tok.dtype)
        k = 0
        if context is not None and context.shape[0] > 0:
            k = context.shape[0]
            if k > self.cfg.max_prompts:
                raise ValueError(f"{k} context vectors exceed max_prompts={self.cfg.max_prompts}")
            # prompts carry no positional code; caption positions match pretraining
            ctx = context.to(tok.dtype)[None].expand(ids.shape[0], -1, -1)
            tok = torch.cat([ctx, tok], dim=1)
        return EmbeddedText(x=tok, n_prompts=k, lengths=lengths)

    def text_hidden(self, seq: EmbeddedText) -> torch.Tensor:
        return self.text(seq.x)

    def encode_text(self, seq: EmbeddedText) -> torch.Tensor:
        h = self.text_hidden(seq)
        pooled = h[torch.arange(h.shape[0]), seq.eos_positions]
        return F.normalize(pooled @ self.text_proj, dim=-1)

    def token_features(self, seq: EmbeddedText) -> tuple[torch.Tensor, torch.Tensor]:
        """Joint-space features of caption words.

        Returns ``(feats, mask)`` with feats (B, n_max, d_joint) and mask
        (B, n_max) true for real words; row ``b`` holds ``lengths[b] - 2`` words.
        """
        h = self.text_hidden(seq)
        n_max = int((seq.lengths - 2).max().clamp(min=0))
        start = seq.n_prompts + 1
        words = h[:, start:start + n_max]
        mask = torch.arange(n_max)[None, :] < (seq.lengths - 2)[:, None]
        return F.normalize(words @ self.text_proj, dim=-1), mask

    # -- vision -------------------------------------------------------------

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C) -> (B, n_patches, patch*patch*C), row-major patch order."""
        c = self.cfg
        if images.dim() == 3:
            images = images[None]
        if tuple(images.shape[1:]) != (c.image_size, c.image_size, c.channels):
            raise ValueError(f"expected images of shape (*, {c.image_size}, {c.image_size}, {c.channels}), "
                             f"got {tuple(images.shape)}")
        b, p, g = images.shape[0], c.patch, c.image_size // c.patch
        x = images.reshape(b, g, p, g, p, c.channels).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, p * p * c.channels)

    def embed_image(self, images: torch.Tensor, visual_prompts: torch.Tensor | None = None) -> torch.Tensor:
        """[CLS, prompts..., patches] with positions on CLS and patches only."""
        patches = self.patch_embed(self.patchify(images).to(self.cls.dtype))
        b = patches.shape[0]
        pos = self.vision_pos.to(patches.dtype)
        cls = (self.cls + pos[0])[None, None].expand(b, 1, -1)
        parts = [cls]
        if visual_prompts is not None and visual_prompts.shape[0] > 0:
            if visual_prompts.shape[0] > self.cfg.max_prompts:
                raise ValueError("too many visual prompts")
            parts.append(visual_prompts.to(patches.dtype)[None].expand(b, -1, -1))
        parts.append(patches + pos[1:])
        return torch.cat(parts, dim=1)

    def encode_image_sequence(self, x: torch.Tensor) -> torch.Tensor:
        h = self.vision(x)
        return F.normalize(h[:, 0] @ self.vision_proj, dim=-1)

    def encode_image(self, images: torch.Tensor, visual_prompts: torch.Tensor | None = None) -> torch.Tensor:
        return self.encode_image_sequence(self.embed_image(images, visual_prompts))


def score(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """exp(cosine(a, b)) along the last axis; inputs need not be normalised."""
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("score is undefined for zero-norm vectors")
    return torch.exp((a * b).sum(-1) / (na * nb))


def encode_texts(backbone: Backbone, seqs: Sequence[TokenSequence],
                 context: torch.Tensor | None = None) -> torch.Tensor:
    ids, lens = batch_ids(seqs)
    return backbone.encode_text(backbone.embed_text(ids, lens, context))


def backbone_state(backbone: Backbone) -> dict[str, torch.Tensor]:
    state = {"backbone.config": torch.tensor(backbone.cfg.as_list(), dtype=torch.float32)}
    for name, t in backbone.state_dict().items():
        state[f"backbone.{name}"] = t.detach()
    return state


def backbone_from_state(state: dict[str, torch.Tensor]) -> Backbone:
    """Rebuild a frozen backbone from :func:`backbone_state` output."""
    if "backbone.config" not in state:
        raise ValueError("state has no backbone.config entry")
    cfg = BackboneConfig.from_list(state["backbone.config"].round().long().tolist())
    model = Backbone(cfg)
    sd = {k[len("backbone."):]: v for k, v in state.items()
          if k.startswith("backbone.") and k != "backbone.config"}
    model.load_state_dict(sd, strict=True)
    return model.freeze()
