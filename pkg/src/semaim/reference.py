"""Sequential reference forward, written directly against numpy arrays.

Predictions are produced one patch at a time in permutation order. When a
patch becomes current, its encoder states for every layer are computed by
attending over the cached states of the [CLS] token, the already-processed
patches and itself; no attention masks are involved. Its prediction is then
decoded from the cached states of the strictly earlier patches only. This is
the autoregressive factorization executed literally, and it shares no code
with the masked parallel implementation.
"""

from __future__ import annotations

import math

import numpy as np

from semaim.model import LN_EPS, SemAIM, patchify
from semaim.ordergen import Permutation

_GELU_C = math.sqrt(2.0 / math.pi)


def _ln(x, p, name):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * p[f"{name}.weight"] + p[f"{name}.bias"]


def _lin(x, p, name):
    y = x @ p[f"{name}.weight"]
    bias = p.get(f"{name}.bias")
    return y if bias is None else y + bias


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _mlp(x, p, name):
    return _lin(_gelu(_lin(x, p, f"{name}.fc1")), p, f"{name}.fc2")


def _attend(query, keys, p, name, heads):
    """One query vector against a (possibly empty) list of key vectors."""
    d = query.shape[-1]
    if keys.shape[0] == 0:
        return _lin(np.zeros(d), p, f"{name}.proj")
    dh = d // heads
    q = _lin(query, p, f"{name}.q").reshape(heads, dh)
    k = _lin(keys, p, f"{name}.k").reshape(-1, heads, dh)
    v = _lin(keys, p, f"{name}.v").reshape(-1, heads, dh)
    out = np.empty((heads, dh))
    for hd in range(heads):
        s = k[:, hd, :] @ q[hd] / math.sqrt(dh)
        w = np.exp(s - s.max())
        w /= w.sum()
        out[hd] = w @ v[:, hd, :]
    return _lin(out.reshape(d), p, f"{name}.proj")


def sequential_reference_forward(image: np.ndarray, perm: Permutation, model: SemAIM) -> np.ndarray:
    """Predictions (N, target_dim) for one (H, W, C) image in the order ``perm``."""
    cfg = model.config
    p = {name: t.data.astype(np.float64) for name, t in model.params.items()}
    pos = model.pos.data.astype(np.float64)
    order = perm.order if isinstance(perm, Permutation) else np.asarray(perm)
    heads, depth = cfg.heads, cfg.encoder_depth

    patches = patchify(np.asarray(image, dtype=np.float64), cfg.patch_size)
    x = np.concatenate([p["cls_token"][None], _lin(patches, p, "patch_embed")]) + pos

    # states[l][t]: output of encoder block l for token t (0 = [CLS], 1 + patch)
    states: list[dict[int, np.ndarray]] = [dict() for _ in range(depth)]

    def encode(token, visible):
        h = x[token]
        for layer in range(depth):
            name = f"encoder.{layer}"
            below = [x[t] if layer == 0 else states[layer - 1][t] for t in visible]
            keys = np.stack([_ln(v, p, f"{name}.norm1") for v in below])
            h = h + _attend(_ln(h, p, f"{name}.norm1"), keys, p, f"{name}.attn", heads)
            h = h + _mlp(_ln(h, p, f"{name}.norm2"), p, f"{name}.mlp")
            states[layer][token] = h

    encode(0, [0])
    preds = np.empty((cfg.num_patches, cfg.target_dim))
    processed: list[int] = []
    for patch in order:
        token = int(patch) + 1
        earlier = list(processed)
        encode(token, [0] + earlier + [token])

        g = pos[token]
        for k, layer in enumerate(cfg.attachment):
            name = f"decoder.{k}"
            keys = [_ln(states[layer][t], p, f"{name}.norm_kv") for t in earlier]
            keys = np.stack(keys) if keys else np.zeros((0, g.shape[0]))
            g = g + _attend(_ln(g, p, f"{name}.norm_q"), keys, p, f"{name}.attn", heads)
            g = g + _mlp(_ln(g, p, f"{name}.norm2"), p, f"{name}.mlp")
        hidden = _gelu(_lin(_ln(g, p, "head.norm"), p, "head.fc1"))
        preds[patch] = _lin(hidden, p, "head.fc2")
        processed.append(token)
    return preds
