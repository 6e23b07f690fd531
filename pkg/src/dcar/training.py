"""Objectives, optimiser, gradient checking, pretraining and prompt adaptation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from dcar.backbone import Backbone, BackboneConfig, TokenSequence, Vocab, batch_ids, tokenize
from dcar.category import CAAHead, gen_negatives, kind_weights, loss_cate
from dcar.dataset import CaptionRecord, Taxonomy, gen_dataset, gen_taxonomy, render_records
from dcar.prompts import PromptParams, encode_prompted_image, encode_prompted_text, init_prompts
from dcar.retrieval import DEFAULT_KS, I2T, T2I, RetrievalReport, evaluate_pairs
from dcar.reweight import batch_token_weights, encode_weighted_batch, make_blank_image

log = logging.getLogger(__name__)

GradientSet = dict[str, torch.Tensor]


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lambda1: float = 0.8
    lambda2: float = 0.2
    tau: float = 0.07
    alpha: float = 0.5
    Q: int = 4
    k: int = 8
    lr: float = 0.002
    warmup_lr: float = 1e-5
    momentum: float = 0.0
    epochs: int = 50
    batch_size: int = 32
    shots: int = 16
    seed: int = 0
    use_dual_prompt: bool = True
    use_token_weighting: bool = True
    use_category_loss: bool = True

    def validate(self) -> "TrainConfig":
        checks = [
            (self.tau > 0, "tau must be > 0"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.Q >= 0, "Q must be >= 0"),
            (1 <= self.k <= 16, "k must be in 1..16"),
            (self.lr >= 0 and self.warmup_lr >= 0, "learning rates must be >= 0"),
            (self.momentum == 0.0, "only plain SGD (momentum 0) is supported"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.shots >= 1, "shots must be >= 1"),
            (self.lambda1 >= 0 and self.lambda2 >= 0, "lambda weights must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw}).validate()

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# -- objectives ---------------------------------------------------------------

def loss_con(image_embs: torch.Tensor, text_embs: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE over cosine/tau logits."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    n = image_embs.shape[0]
    if n == 0 or text_embs.shape[0] != n:
        raise ValueError("loss_con needs equal, non-empty batches")
    logits = F.normalize(image_embs, dim=-1) @ F.normalize(text_embs, dim=-1).T / tau
    diag = torch.arange(n)
    rows = logits.log_softmax(dim=1)[diag, diag]
    cols = logits.log_softmax(dim=0)[diag, diag]
    return -(rows + cols).sum() / n


def loss_con_ratio_form(image_embs: torch.Tensor, text_embs: torch.Tensor, tau: float) -> torch.Tensor:
    """Reference form that divides each exp-cosine score by tau inside the ratio.

    The division cancels, so the value does not depend on ``tau``; kept to
    document why ``loss_con`` applies the temperature inside the exponent.
    """
    a = F.normalize(image_embs, dim=-1)
    b = F.normalize(text_embs, dim=-1)
    s = torch.exp(a @ b.T) / tau
    n = s.shape[0]
    diag = torch.arange(n)
    rows = torch.log(s[diag, diag] / s.sum(dim=1))
    cols = torch.log(s[diag, diag] / s.sum(dim=0))
    return -(rows + cols).sum() / n


def loss_total(lcon, lcate, lambda1: float, lambda2: float):
    return lambda1 * lcon + lambda2 * lcate


def lr_schedule(epoch: int, step_frac: float, cfg: TrainConfig) -> float:
    """One warmup epoch at ``warmup_lr``, then cosine from ``lr`` to 0."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch == 0:
        return cfg.warmup_lr
    span = max(cfg.epochs - 1, 1)
    t = min(max((epoch - 1 + step_frac) / span, 0.0), 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t))


# -- gradient engine ---------------------------------------------------------

def trainable_params(prompts: PromptParams | None, head: CAAHead | None) -> dict[str, torch.nn.Parameter]:
    out: dict[str, torch.nn.Parameter] = {}
    if prompts is not None:
        out.update({f"prompt.{n}": p for n, p in prompts.named_parameters()})
    if head is not None:
        out.update({f"caa.{n}": p for n, p in head.named_parameters()})
    return out


def compute_gradients(loss_fn: Callable[[], torch.Tensor],
                      params: Mapping[str, torch.Tensor]) -> GradientSet:
    if not params:
        return {}
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    tensors = list(params.values())
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in params.items()}
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
        out[name] = g
    return out


@torch.no_grad()
def sgd_step(params: Mapping[str, torch.Tensor], grads: GradientSet, lr: float) -> None:
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match {name} {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
        p.sub_(lr * g)


# -- data --------------------------------------------------------------------

@dataclass
class PairSet:
    """Rendered images and tokenised captions for a list of records."""

    records: list[CaptionRecord]
    images: torch.Tensor
    ids: torch.Tensor
    lengths: torch.Tensor

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def build(cls, records: Sequence[CaptionRecord], taxonomy: Taxonomy, vocab: Vocab,
              max_len: int) -> "PairSet":
        seqs = [tokenize(r.caption, vocab, max_len) for r in records]
        ids, lens = batch_ids(seqs) if seqs else (torch.zeros(0, max_len, dtype=torch.long),
                                                   torch.zeros(0, dtype=torch.long))
        return cls(list(records), torch.from_numpy(render_records(taxonomy, list(records))), ids, lens)


@dataclass
class NegativeSet:
    ids: torch.Tensor       # (N, Q, L)
    lengths: torch.Tensor   # (N, Q)
    kinds: list[list[str]]

    @classmethod
    def build(cls, pairs: PairSet, taxonomy: Taxonomy, vocab: Vocab, Q: int, seed: int,
              max_len: int) -> "NegativeSet":
        kinds, seqs = [], []
        for r in pairs.records:
            negs = gen_negatives(r, taxonomy, Q, seed)
            kinds.append([n.kind for n in negs])
            seqs.extend(tokenize(n.text, vocab, max_len) for n in negs)
        n = len(pairs)
        if Q == 0 or n == 0:
            return cls(torch.zeros(n, 0, max_len, dtype=torch.long), torch.zeros(n, 0, dtype=torch.long), kinds)
        ids, lens = batch_ids(seqs)
        return cls(ids.view(n, Q, -1), lens.view(n, Q), kinds)


@dataclass
class Batch:
    images: torch.Tensor
    ids: torch.Tensor
    lengths: torch.Tensor
    neg_ids: torch.Tensor
    neg_lengths: torch.Tensor
    neg_weights: torch.Tensor


def make_batch(pairs: PairSet, negs: NegativeSet | None, idx: torch.Tensor, alpha: float) -> Batch:
    q = 0 if negs is None else negs.ids.shape[1]
    if q:
        nw = kind_weights([negs.kinds[i] for i in idx.tolist()], alpha)
        nid, nlen = negs.ids[idx], negs.lengths[idx]
    else:
        n = len(idx)
        nw = torch.zeros(n, 0, dtype=torch.float64)
        nid = torch.zeros(n, 0, pairs.ids.shape[1], dtype=torch.long)
        nlen = torch.zeros(n, 0, dtype=torch.long)
    return Batch(pairs.images[idx], pairs.ids[idx], pairs.lengths[idx], nid, nlen, nw)


# -- forward objective -------------------------------------------------------

@dataclass
class Losses:
    con: torch.Tensor
    cate: torch.Tensor
    total: torch.Tensor
    word_weights: torch.Tensor | None = None


def batch_losses(backbone: Backbone, prompts: PromptParams | None, head: CAAHead | None,
                 batch: Batch, cfg: TrainConfig,
                 word_weights: torch.Tensor | None = None) -> Losses:
    """L_con (+ L_cate) on one batch.

    ``word_weights`` may be passed to reuse frozen token weights (gradient
    checking); otherwise they are recomputed from the current prompts.
    """
    p = prompts if cfg.use_dual_prompt else None
    dtype = backbone.cls.dtype
    images = batch.images.to(dtype)
    image_embs = encode_prompted_image(p, images, backbone)
    plain_text = None
    if cfg.use_token_weighting:
        if word_weights is None:
            _, word_weights, _, _ = batch_token_weights(backbone, p, batch.ids, batch.lengths, images,
                                                        image_embs=image_embs.detach())
        text = encode_weighted_batch(backbone, p, batch.ids, batch.lengths, word_weights)
    else:
        text = plain_text = encode_prompted_text(p, batch.ids, batch.lengths, backbone)
    lcon = loss_con(image_embs, text, cfg.tau)

    q = batch.neg_ids.shape[1]
    if cfg.use_category_loss and head is not None and q > 0:
        if plain_text is None:
            plain_text = encode_prompted_text(p, batch.ids, batch.lengths, backbone)
        n, _, L = batch.neg_ids.shape
        neg = encode_prompted_text(p, batch.neg_ids.reshape(n * q, L), batch.neg_lengths.reshape(n * q), backbone)
        lcate = loss_cate(head, image_embs, plain_text, neg.view(n, q, -1), batch.neg_weights, cfg.alpha, cfg.tau)
        total = loss_total(lcon, lcate, cfg.lambda1, cfg.lambda2)
    else:
        lcate = torch.zeros((), dtype=lcon.dtype)
        total = loss_total(lcon, lcate, cfg.lambda1, 0.0)
    return Losses(lcon, lcate, total, word_weights)


# -- gradient check ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    table: list[dict]
    epsilon: float
    n_coords: int
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < 1e-4


def _tiny_problem(cfg: TrainConfig, n: int = 4, seed: int = 0):
    tax = gen_taxonomy(2, 2, seed)
    recs = gen_dataset(tax, per_sub=1, seed=seed)[:n]
    vocab = Vocab.from_texts(r.caption for r in recs)
    bcfg = BackboneConfig(vocab_size=len(vocab))
    backbone = Backbone.create(bcfg, seed).freeze().double()
    pairs = PairSet.build(recs, tax, vocab, bcfg.max_len)
    negs = NegativeSet.build(pairs, tax, vocab, cfg.Q, seed, bcfg.max_len)
    batch = make_batch(pairs, negs, torch.arange(len(recs)), cfg.alpha)
    prompts = head = None
    if cfg.use_dual_prompt:
        prompts = init_prompts(min(cfg.k, 4), seed + 1, bcfg.d_text, bcfg.d_vision).double()
        # larger than the 0.02 init so gradients are well away from zero
        with torch.no_grad():
            for t in prompts.parameters():
                t.add_(torch.randn(t.shape, generator=torch.Generator().manual_seed(seed + 7),
                                   dtype=t.dtype) * 0.3)
            # the projection stays small: large entries leave some gradients near roundoff
            g = torch.Generator().manual_seed(seed + 11)
            prompts.F_weight.copy_(torch.randn(prompts.F_weight.shape, generator=g,
                                               dtype=prompts.F_weight.dtype) * 0.05)
    if cfg.use_category_loss and cfg.Q > 0:
        head = CAAHead.create(bcfg.d_joint, seed + 2).double()
        with torch.no_grad():
            head.b1.add_(0.1)
    return backbone, prompts, head, batch


def grad_check(cfg: TrainConfig, epsilon: float = 1e-4, per_tensor: int = 64, seed: int = 0) -> GradCheckReport:
    """Compare autograd gradients of L_total with central differences in float64.

    Token weights are evaluated once and held fixed, matching their
    stop-gradient treatment in training. Up to ``per_tensor`` seeded
    coordinates are probed in every trainable tensor.
    """
    t0 = time.perf_counter()
    cfg = cfg.replace(k=min(cfg.k, 4))
    backbone, prompts, head, batch = _tiny_problem(cfg, seed=seed)
    params = trainable_params(prompts if cfg.use_dual_prompt else None, head)
    if not params:
        return GradCheckReport(0.0, [], epsilon, 0, time.perf_counter() - t0)

    weights = batch_losses(backbone, prompts, head, batch, cfg).word_weights

    def f() -> torch.Tensor:
        return batch_losses(backbone, prompts, head, batch, cfg, word_weights=weights).total

    analytic = compute_gradients(f, params)
    rng = np.random.default_rng(seed)
    table, worst, count = [], 0.0, 0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            m = flat.numel()
            coords = np.sort(rng.choice(m, size=min(per_tensor, m), replace=False))
            errs = []
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + epsilon
                fp = f().item()
                flat[c] = orig - epsilon
                fm = f().item()
                flat[c] = orig
                g_fd = (fp - fm) / (2 * epsilon)
                g_a = analytic[name].view(-1)[c].item()
                errs.append(abs(g_a - g_fd) / max(abs(g_a), abs(g_fd), 1e-8))
            count += len(coords)
            table.append({"param": name, "n_checked": len(coords), "max_rel_err": max(errs),
                          "max_abs_grad": float(analytic[name].abs().max())})
            worst = max(worst, max(errs))
    return GradCheckReport(worst, table, epsilon, count, time.perf_counter() - t0)


# -- evaluation --------------------------------------------------------------

@torch.no_grad()
def embed_pairs(backbone: Backbone, prompts: PromptParams | None, pairs: PairSet,
                chunk: int = 256) -> tuple[torch.Tensor, torch.Tensor]:
    imgs, txts = [], []
    for s in range(0, len(pairs), chunk):
        sl = slice(s, s + chunk)
        imgs.append(encode_prompted_image(prompts, pairs.images[sl], backbone))
        txts.append(encode_prompted_text(prompts, pairs.ids[sl], pairs.lengths[sl], backbone))
    return torch.cat(imgs), torch.cat(txts)


def evaluate(backbone: Backbone, prompts: PromptParams | None, pairs: PairSet,
             ks: Sequence[int] = DEFAULT_KS) -> dict[str, RetrievalReport]:
    """Retrieval with the prompted (unweighted) text and image embeddings."""
    i, t = embed_pairs(backbone, prompts, pairs)
    return evaluate_pairs(i.numpy(), t.numpy(), ks)


# -- pretraining -------------------------------------------------------------

@dataclass
class PretrainResult:
    backbone: Backbone
    epoch_losses: list[float]


def _random_prefix(bcfg: BackboneConfig, gen: torch.Generator) -> tuple[torch.Tensor | None, torch.Tensor | None]:
    # half the batches see no prefix; the rest a random-length one
    if torch.rand((), generator=gen) < 0.5:
        return None, None
    r = int(torch.randint(1, bcfg.max_prompts + 1, (), generator=gen))
    ctx = torch.randn(r, bcfg.d_text, generator=gen) * PREFIX_STD
    vis = torch.randn(r, bcfg.d_vision, generator=gen) * PREFIX_STD
    return ctx, vis


PREFIX_STD = 0.02


def _pretrain_lr(step: int, total: int, peak: float, warmup_frac: float) -> float:
    warm = max(int(total * warmup_frac), 1)
    if step < warm:
        return peak * (step + 1) / warm
    return peak * 0.5 * (1 + math.cos(math.pi * (step - warm) / max(total - warm, 1)))


def _random_word_scale(lengths: torch.Tensor, gen: torch.Generator) -> torch.Tensor | None:
    # random per-caption probability vectors over words, shaped like normalised token weights
    if torch.rand((), generator=gen) < 0.5:
        return None
    n_max = int((lengths - 2).max())
    raw = torch.rand(len(lengths), n_max, generator=gen)
    mask = torch.arange(n_max)[None, :] < (lengths - 2)[:, None]
    raw = torch.where(mask, raw, torch.zeros_like(raw))
    return raw / raw.sum(-1, keepdim=True).clamp(min=1e-12)


def pretrain_backbone(pairs: PairSet, vocab_size: int, epochs: int = 200, seed: int = 0,
                      lr: float = 1e-3, batch_size: int = 64, tau: float = 0.07,
                      bcfg: BackboneConfig | None = None, prefix_aug: bool = True,
                      scale_aug: bool = True, warmup_frac: float = 0.05) -> PretrainResult:
    """Train every backbone weight with the symmetric contrastive loss, then freeze.

    With ``prefix_aug`` half of the batches get a random-length prefix of
    small random vectors on both towers, so the frozen encoders later
    tolerate extra prompt tokens. With ``scale_aug`` half of the batches
    scale caption words by a random probability vector, the input regime
    of token re-weighting.
    """
    if len(pairs) == 0:
        raise ValueError("cannot pretrain on an empty split")
    bcfg = bcfg or BackboneConfig(vocab_size=vocab_size)
    backbone = Backbone.create(bcfg, seed)
    losses: list[float] = []
    if epochs > 0:
        opt = torch.optim.Adam(backbone.parameters(), lr=lr)
        gen = torch.Generator().manual_seed(seed)
        steps_per_epoch = math.ceil(len(pairs) / batch_size)
        total = epochs * steps_per_epoch
        step = 0
        for ep in range(epochs):
            order = torch.randperm(len(pairs), generator=gen)
            run = 0.0
            for s in range(steps_per_epoch):
                idx = order[s * batch_size:(s + 1) * batch_size]
                if len(idx) < 2:
                    continue
                for grp in opt.param_groups:
                    grp["lr"] = _pretrain_lr(step, total, lr, warmup_frac)
                ctx = vis = scale = None
                if prefix_aug:
                    ctx, vis = _random_prefix(bcfg, gen)
                if scale_aug:
                    scale = _random_word_scale(pairs.lengths[idx], gen)
                emb_i = backbone.encode_image(pairs.images[idx], vis)
                emb_t = backbone.encode_text(backbone.embed_text(pairs.ids[idx], pairs.lengths[idx], ctx, scale))
                loss = loss_con(emb_i, emb_t, tau)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                run += loss.item() * len(idx)
                step += 1
            losses.append(run / len(pairs))
            log.info("pretrain epoch %d loss %.4f", ep, losses[-1])
    backbone.freeze()
    backbone.check_finite()
    return PretrainResult(backbone, losses)


# -- adaptation --------------------------------------------------------------

HISTORY_COLUMNS = ("epoch", "lr", "loss_con", "loss_cate", "loss_total", "val_r1_i2t", "val_r1_t2i")


@dataclass
class TrainResult:
    prompts: PromptParams | None
    head: CAAHead | None
    history: list[dict] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


@torch.no_grad()
def mean_objective(backbone: Backbone, prompts: PromptParams | None, head: CAAHead | None,
                   pairs: PairSet, negs: NegativeSet | None, cfg: TrainConfig) -> float:
    """L_total averaged over ``pairs`` in fixed, unshuffled batches."""
    tot, n = 0.0, 0
    for s in range(0, len(pairs), cfg.batch_size):
        idx = torch.arange(s, min(s + cfg.batch_size, len(pairs)))
        b = make_batch(pairs, negs, idx, cfg.alpha)
        tot += batch_losses(backbone, prompts, head, b, cfg).total.item() * len(idx)
        n += len(idx)
    return tot / max(n, 1)


def train(cfg: TrainConfig, backbone: Backbone, train_pairs: PairSet, val_pairs: PairSet | None,
          negatives: NegativeSet | None = None, track_objective: bool = True) -> TrainResult:
    """Adapt prompts (and the CAA head) with the backbone frozen."""
    cfg.validate()
    if not backbone.frozen:
        raise ValueError("train() requires a frozen backbone")
    bc = backbone.cfg
    prompts = init_prompts(cfg.k, cfg.seed, bc.d_text, bc.d_vision) if cfg.use_dual_prompt else None
    head = CAAHead.create(bc.d_joint, cfg.seed + 1) if cfg.use_category_loss and cfg.Q > 0 else None
    negs = negatives if head is not None else None
    params = trainable_params(prompts, head)
    result = TrainResult(prompts, head)
    if track_objective:
        result.initial_loss = mean_objective(backbone, prompts, head, train_pairs, negs, cfg)

    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(train_pairs)
    steps = math.ceil(n / cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        sums = np.zeros(3)
        lr = 0.0
        for s in range(steps):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            batch = make_batch(train_pairs, negs, idx, cfg.alpha)
            lr = lr_schedule(epoch, s / steps, cfg)
            holder: dict[str, Losses] = {}

            def closure() -> torch.Tensor:
                holder["l"] = batch_losses(backbone, prompts, head, batch, cfg)
                return holder["l"].total

            grads = compute_gradients(closure, params)
            if not params:
                closure()
            sgd_step(params, grads, lr)
            l = holder["l"]
            if not torch.isfinite(l.total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} step {s}")
            sums += np.array([l.con.item(), l.cate.item(), l.total.item()]) * len(idx)
        row = {"epoch": epoch, "lr": lr}
        row.update(zip(("loss_con", "loss_cate", "loss_total"), (sums / n).tolist()))
        if val_pairs is not None and len(val_pairs):
            rep = evaluate(backbone, prompts, val_pairs, ks=(1,))
            row["val_r1_i2t"], row["val_r1_t2i"] = rep[I2T].recall[1], rep[T2I].recall[1]
        else:
            row["val_r1_i2t"] = row["val_r1_t2i"] = float("nan")
        result.history.append(row)
        if val_pairs is not None and len(val_pairs):
            log.info("epoch %d lr %.2e loss %.4f val R@1 %.3f/%.3f", epoch, lr, row["loss_total"],
                     row["val_r1_i2t"], row["val_r1_t2i"])
        else:
            log.info("epoch %d lr %.2e loss %.4f", epoch, lr, row["loss_total"])
    if track_objective:
        result.final_loss = mean_objective(backbone, prompts, head, train_pairs, negs, cfg)
    return result


def adapted_state(result: TrainResult, cfg: TrainConfig) -> dict[str, torch.Tensor]:
    state = {"meta.flags": torch.tensor([float(cfg.use_dual_prompt), float(cfg.use_token_weighting),
                                         float(cfg.use_category_loss), float(cfg.k)])}
    for name, p in trainable_params(result.prompts, result.head).items():
        state[name] = p.detach()
    return state


def prompts_from_state(state: Mapping[str, torch.Tensor]) -> PromptParams | None:
    if "prompt.V" not in state:
        return None
    V = state["prompt.V"]
    p = PromptParams(V.shape[0], V.shape[1], state["prompt.F_weight"].shape[0])
    with torch.no_grad():
        p.V.copy_(V)
        p.F_weight.copy_(state["prompt.F_weight"])
        p.F_bias.copy_(state["prompt.F_bias"])
    return p


def blank_embedding(backbone: Backbone, prompts: PromptParams | None) -> torch.Tensor:
    c = backbone.cfg
    with torch.no_grad():
        return encode_prompted_image(prompts, make_blank_image(c.image_size, c.channels), backbone)[0]
