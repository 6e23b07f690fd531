"""Straight-line numpy re-implementations used as independent test oracles.

Nothing here imports the package's forward code: the encoders are rebuilt
from the raw state dict with explicit loops over heads and layers.
"""

from __future__ import annotations

import math

import numpy as np

_erf = np.vectorize(math.erf)


def layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def gelu(x):
    return 0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)))


def sinusoid(n, d, scale):
    pe = np.zeros((n, d))
    for p in range(n):
        for i in range(0, d, 2):
            angle = p / (10000.0 ** (i / d))
            pe[p, i] = math.sin(angle)
            pe[p, i + 1] = math.cos(angle)
    return pe * scale


def _block(x, sd, prefix, heads, causal):
    n, w = x.shape
    hd = w // heads
    h = layer_norm(x, sd[prefix + "ln1.weight"], sd[prefix + "ln1.bias"])
    qkv = h @ sd[prefix + "qkv.weight"].T + sd[prefix + "qkv.bias"]
    q, k, v = qkv[:, :w], qkv[:, w:2 * w], qkv[:, 2 * w:]
    out = np.zeros_like(x)
    for head in range(heads):
        sl = slice(head * hd, (head + 1) * hd)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
        if causal:
            s = s + np.triu(np.full((n, n), -np.inf), 1)
        s = np.exp(s - s.max(-1, keepdims=True))
        s = s / s.sum(-1, keepdims=True)
        out[:, sl] = s @ v[:, sl]
    x = x + out @ sd[prefix + "out.weight"].T + sd[prefix + "out.bias"]
    h = layer_norm(x, sd[prefix + "ln2.weight"], sd[prefix + "ln2.bias"])
    h = gelu(h @ sd[prefix + "fc1.weight"].T + sd[prefix + "fc1.bias"])
    return x + h @ sd[prefix + "fc2.weight"].T + sd[prefix + "fc2.bias"]


def _tower(x, sd, name, layers, heads, causal):
    for i in range(layers):
        x = _block(x, sd, f"{name}.blocks.{i}.", heads, causal)
    return layer_norm(x, sd[f"{name}.ln_final.weight"], sd[f"{name}.ln_final.bias"])


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def to_numpy_state(backbone):
    return {k: v.detach().double().numpy() for k, v in backbone.state_dict().items()}


def text_hidden(sd, cfg, token_ids, context=None, word_scale=None, pos_scale=None):
    """Final-layer states for one unpadded caption (BOS ... EOS)."""
    ids = list(token_ids)
    emb = sd["token_embedding"][ids].copy()
    if word_scale is not None:
        for j, w in enumerate(word_scale):
            emb[1 + j] *= w
    pe = sd["text_pos"] if pos_scale is None else sinusoid(cfg.max_len, cfg.d_text, pos_scale)
    x = emb + pe[:len(ids)]
    k = 0
    if context is not None:
        k = len(context)
        x = np.concatenate([np.asarray(context, dtype=np.float64), x], axis=0)
    return _tower(x, sd, "text", cfg.text_layers, cfg.heads, causal=True), k


def encode_text(sd, cfg, token_ids, context=None, word_scale=None):
    h, k = text_hidden(sd, cfg, token_ids, context, word_scale)
    return _unit(h[k + len(token_ids) - 1] @ sd["text_proj"])


def token_features(sd, cfg, token_ids, context=None):
    h, k = text_hidden(sd, cfg, token_ids, context)
    return _unit(h[k + 1:k + len(token_ids) - 1] @ sd["text_proj"])


def patches(image, p):
    h, w, c = image.shape
    rows = []
    for r in range(0, h, p):
        for col in range(0, w, p):
            rows.append(image[r:r + p, col:col + p, :].reshape(-1))
    return np.stack(rows)


def encode_image(sd, cfg, image, visual_prompts=None):
    pe = sd["vision_pos"]
    x = patches(np.asarray(image, dtype=np.float64), cfg.patch) @ sd["patch_embed.weight"].T + pe[1:]
    parts = [(sd["cls"] + pe[0])[None]]
    if visual_prompts is not None:
        parts.append(np.asarray(visual_prompts, dtype=np.float64))
    parts.append(x)
    h = _tower(np.concatenate(parts, axis=0), sd, "vision", cfg.vision_layers, cfg.heads, causal=False)
    return _unit(h[0] @ sd["vision_proj"])


def recall_bruteforce(scores, gt, k):
    """Count queries whose ground truth is among the k best, ties to the lower index."""
    hits = 0
    for i, row in enumerate(scores):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += gt[i] in order[:k]
    return hits / len(scores)


def topk_sort(row, k):
    return [j for _, j in sorted(((-v, j) for j, v in enumerate(row)))][:k]
