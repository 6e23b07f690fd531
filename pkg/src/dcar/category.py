"""Typed negative captions, the category-aware head and its weighted loss."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from dcar.dataset import ATTRIBUTE_KEYS, CaptionRecord, Taxonomy, caption_for

CATEGORY_SWAP = "category_swap"
ATTRIBUTE_SWAP = "attribute_swap"
POSITIVE = "positive"
KINDS = (POSITIVE, CATEGORY_SWAP, ATTRIBUTE_SWAP)
INIT_NOISE = 0.01


@dataclass(frozen=True)
class NegativeCaption:
    text: str
    kind: str
    source_id: str


def _record_rng(record: CaptionRecord, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(record.id.encode("utf-8"))])


def gen_negatives(record: CaptionRecord, taxonomy: Taxonomy, Q: int, seed: int) -> list[NegativeCaption]:
    """Q negatives alternating category_swap / attribute_swap, starting with a category swap."""
    if Q < 0:
        raise ValueError("Q must be >= 0")
    if Q == 0:
        return []
    siblings = taxonomy.siblings(record.subcategory)
    if not siblings:
        raise ValueError(f"{record.subcategory} has no sibling subcategory to swap in")
    rng = _record_rng(record, seed)
    out = []
    for i in range(Q):
        attrs = dict(record.attributes)
        sub = record.subcategory
        if i % 2 == 0:
            sub = siblings[rng.integers(len(siblings))]
            kind = CATEGORY_SWAP
        else:
            key = ATTRIBUTE_KEYS[rng.integers(len(ATTRIBUTE_KEYS))]
            choices = [v for v in taxonomy.schema[key] if v != attrs[key]]
            if not choices:
                raise ValueError(f"attribute {key} has a single value; cannot swap")
            attrs[key] = choices[rng.integers(len(choices))]
            kind = ATTRIBUTE_SWAP
        text = caption_for(subcategory=sub, meta_category=record.meta_category, **attrs)
        out.append(NegativeCaption(text=text, kind=kind, source_id=record.id))
    return out


def write_negatives(path: Path, negatives: Sequence[NegativeCaption]) -> None:
    lines = (json.dumps({"source_id": n.source_id, "kind": n.kind, "text": n.text},
                        separators=(",", ":")) for n in negatives)
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_negatives(path: Path) -> list[NegativeCaption]:
    rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    return [NegativeCaption(**r) for r in rows]


class CAAHead(nn.Module):
    """Two affine layers with a rectifier in between; output is unit-normalised."""

    def __init__(self, d: int = 32):
        super().__init__()
        self.W1 = nn.Parameter(torch.zeros(d, d))
        self.b1 = nn.Parameter(torch.zeros(d))
        self.W2 = nn.Parameter(torch.zeros(d, d))
        self.b2 = nn.Parameter(torch.zeros(d))

    @classmethod
    def create(cls, d: int, seed: int) -> "CAAHead":
        head = cls(d)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            # near-identity start: the loss initially acts on T' itself
            head.W1.copy_(torch.eye(d) + torch.randn(d, d, generator=g) * INIT_NOISE)
            head.W2.copy_(torch.eye(d) + torch.randn(d, d, generator=g) * INIT_NOISE)
        return head

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return caa_forward(self, t)


def caa_forward(head: CAAHead, t: torch.Tensor) -> torch.Tensor:
    h = F.relu(t @ head.W1.T + head.b1)
    return F.normalize(h @ head.W2.T + head.b2, dim=-1)


def category_weight(kind: str, alpha: float) -> float:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if kind in (POSITIVE, ATTRIBUTE_SWAP):
        return 1.0 + alpha
    if kind == CATEGORY_SWAP:
        return 1.0
    raise ValueError(f"unknown caption kind {kind!r}")


def kind_weights(kinds: Sequence[Sequence[str]], alpha: float) -> torch.Tensor:
    """(N, Q) weight table for negative kinds."""
    return torch.tensor([[category_weight(k, alpha) for k in row] for row in kinds], dtype=torch.float64)


def _weighted_nce(pos_logit: torch.Tensor, neg_logit: torch.Tensor,
                  pos_w: torch.Tensor, neg_w: torch.Tensor) -> torch.Tensor:
    """Per-sample -log(w+ e^p / (w+ e^p + sum_j w_j e^{n_j})), computed in log space."""
    lp = torch.log(pos_w) + pos_logit
    ln = torch.log(neg_w) + neg_logit
    return torch.logsumexp(torch.cat([lp[:, None], ln], dim=1), dim=1) - lp


def loss_cate(head: CAAHead, image_embs: torch.Tensor, pos_text_embs: torch.Tensor,
              neg_text_embs: torch.Tensor, neg_kinds: Sequence[Sequence[str]] | torch.Tensor,
              alpha: float, tau: float) -> torch.Tensor:
    """Category-sensitive loss, averaged over the batch.

    ``neg_text_embs`` is (N, Q, d). ``neg_kinds`` is either an (N, Q) nested
    sequence of kind names or a precomputed weight tensor from :func:`kind_weights`.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    n = image_embs.shape[0]
    img = F.normalize(image_embs, dim=-1)
    pos = (caa_forward(head, pos_text_embs) * img).sum(-1) / tau
    neg = (caa_forward(head, neg_text_embs) * img[:, None, :]).sum(-1) / tau
    if isinstance(neg_kinds, torch.Tensor):
        neg_w = neg_kinds.to(pos.dtype)
    else:
        neg_w = kind_weights(neg_kinds, alpha).to(pos.dtype).reshape(n, neg.shape[1])
    pos_w = torch.full_like(pos, category_weight(POSITIVE, alpha))
    return _weighted_nce(pos, neg, pos_w, neg_w).mean()


def loss_cate_unweighted(head: CAAHead, image_embs: torch.Tensor, pos_text_embs: torch.Tensor,
                         neg_text_embs: torch.Tensor, tau: float) -> torch.Tensor:
    """The unweighted form (every sample weight 1), written out directly."""
    img = F.normalize(image_embs, dim=-1)
    pos = torch.exp((caa_forward(head, pos_text_embs) * img).sum(-1) / tau)
    neg = torch.exp((caa_forward(head, neg_text_embs) * img[:, None, :]).sum(-1) / tau).sum(-1)
    return (-torch.log(pos / (pos + neg))).mean()
