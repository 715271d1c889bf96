"""Parallel encoder-decoder for permutation-ordered patch prediction.

The encoder is a pre-norm ViT whose self-attention is restricted by the
encoder mask (a token sees itself and every earlier token). The decoder runs
cross-attention blocks whose queries start from the fixed positional
embeddings and whose keys/values are patch tokens of an attached encoder
layer, restricted by the strict decoder mask. An MLP head maps decoder
outputs to the prediction target.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from semaim import numerics as nx
from semaim import ordergen as og
from semaim.errors import ContractError, DimensionError
from semaim.numerics import Tensor

LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] = (32, 32)
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    encoder_depth: int = 4
    decoder_depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    target_dim: int | None = None
    similarity_layer: int | None = None
    order_lambda: float = og.DEFAULT_LAMBDA

    def __post_init__(self):
        h, w = self.image_size
        p = self.patch_size
        object.__setattr__(self, "image_size", (int(h), int(w)))
        if p < 1 or h % p or w % p:
            raise ContractError(f"image_size {self.image_size} is not divisible by patch_size {p}")
        if not 1 <= self.decoder_depth <= self.encoder_depth:
            raise ContractError(
                f"decoder_depth must lie in [1, encoder_depth={self.encoder_depth}], got {self.decoder_depth}"
            )
        if self.embed_dim % 4:
            raise ContractError(f"embed_dim must be divisible by 4, got {self.embed_dim}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ContractError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.target_dim is None:
            object.__setattr__(self, "target_dim", self.patch_dim)
        if self.similarity_layer is None:
            object.__setattr__(self, "similarity_layer", self.encoder_depth - 1)
        if not 0 <= self.similarity_layer < self.encoder_depth:
            raise ContractError(f"similarity_layer {self.similarity_layer} outside encoder depth")
        if self.order_lambda < 0:
            raise ContractError("order_lambda must be non-negative")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def attachment(self) -> tuple[int, ...]:
        """Encoder layer (0-based) feeding each decoder block, uniformly spaced."""
        L, Ld = self.encoder_depth, self.decoder_depth
        return tuple(int(math.floor(k * L / Ld + 0.5)) - 1 for k in range(1, Ld + 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(…, H, W, C) -> (…, N, P*P*C); row-major patches, channel-fastest pixels."""
    image = np.asarray(image)
    *lead, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ContractError(f"image {h}x{w} is not divisible by patch size {p}")
    x = image.reshape(*lead, h // p, p, w // p, p, c)
    k = len(lead)
    x = np.moveaxis(x, k + 2, k + 1)
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify(patches: np.ndarray, grid: tuple[int, int], patch_size: int, channels: int) -> np.ndarray:
    patches = np.asarray(patches)
    *lead, n, _ = patches.shape
    gh, gw = grid
    p = patch_size
    x = patches.reshape(*lead, gh, gw, p, p, channels)
    k = len(lead)
    x = np.moveaxis(x, k + 1, k + 2)
    return x.reshape(*lead, gh * p, gw * p, channels)


def sincos_pos_embed(grid: tuple[int, int], dim: int) -> np.ndarray:
    """Fixed 2D sine-cosine table with a zero [CLS] row first.

    The first half of each row encodes the patch row, the second half the
    patch column; within a half, entries alternate sin/cos at geometrically
    spaced frequencies.
    """
    if dim % 4:
        raise ContractError(f"positional embedding dim must be divisible by 4, got {dim}")
    gh, gw = grid
    quarter = dim // 4
    omega = 1.0 / 10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter)

    def encode(pos):
        angles = pos[:, None] * omega[None, :]
        out = np.empty((pos.size, 2 * quarter))
        out[:, 0::2] = np.sin(angles)
        out[:, 1::2] = np.cos(angles)
        return out

    rows, cols = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    table = np.concatenate([encode(rows.reshape(-1)), encode(cols.reshape(-1))], axis=1)
    return np.concatenate([np.zeros((1, dim)), table], axis=0)


def _xavier(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    D, hidden = config.embed_dim, config.mlp_hidden
    arrays: dict[str, np.ndarray] = {}

    def linear(name, fan_in, fan_out, bias=True):
        arrays[f"{name}.weight"] = _xavier(rng, fan_in, fan_out)
        if bias:
            arrays[f"{name}.bias"] = np.zeros(fan_out)

    def norm(name, dim=D):
        arrays[f"{name}.weight"] = np.ones(dim)
        arrays[f"{name}.bias"] = np.zeros(dim)

    linear("patch_embed", config.patch_dim, D)
    arrays["cls_token"] = rng.normal(0.0, 0.02, size=D)
    for l in range(config.encoder_depth):
        prefix = f"encoder.{l}"
        norm(f"{prefix}.norm1")
        for proj in ("q", "k", "v", "proj"):
            # a key bias only shifts each query's scores uniformly, so it never learns
            linear(f"{prefix}.attn.{proj}", D, D, bias=proj != "k")
        norm(f"{prefix}.norm2")
        linear(f"{prefix}.mlp.fc1", D, hidden)
        linear(f"{prefix}.mlp.fc2", hidden, D)
    for l in range(config.decoder_depth):
        prefix = f"decoder.{l}"
        norm(f"{prefix}.norm_q")
        norm(f"{prefix}.norm_kv")
        for proj in ("q", "k", "v", "proj"):
            linear(f"{prefix}.attn.{proj}", D, D, bias=proj != "k")
        norm(f"{prefix}.norm2")
        linear(f"{prefix}.mlp.fc1", D, hidden)
        linear(f"{prefix}.mlp.fc2", hidden, D)
    norm("head.norm")
    linear("head.fc1", D, D)
    linear("head.fc2", D, config.target_dim)
    dtype = nx.get_default_dtype()
    return {name: Tensor(a.astype(dtype), requires_grad=True) for name, a in arrays.items()}


@dataclass
class SemAIM:
    """Configuration, learnable parameters and the fixed positional table."""

    config: ModelConfig
    params: dict[str, Tensor]
    pos: Tensor = field(init=False)

    def __post_init__(self):
        dtype = next(iter(self.params.values())).dtype
        self.pos = Tensor(sincos_pos_embed(self.config.grid, self.config.embed_dim).astype(dtype))

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> SemAIM:
        return cls(config, init_params(config, np.random.default_rng(seed)))

    @property
    def dtype(self) -> np.dtype:
        return self.pos.dtype

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ContractError(f"state is missing parameters: {sorted(missing)}")
        for name, t in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise DimensionError(f"parameter {name}: expected {t.shape}, got {arr.shape}")
            self.params[name] = Tensor(arr.astype(t.dtype), requires_grad=True)


def _linear(x: Tensor, model: SemAIM, name: str) -> Tensor:
    return nx.linear(x, model[f"{name}.weight"], model.params.get(f"{name}.bias"))


def _norm(x: Tensor, model: SemAIM, name: str) -> Tensor:
    return nx.layer_norm(x, model[f"{name}.weight"], model[f"{name}.bias"], LN_EPS)


def _mlp(x: Tensor, model: SemAIM, name: str) -> Tensor:
    return _linear(nx.gelu(_linear(x, model, f"{name}.fc1")), model, f"{name}.fc2")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _attention(q_in: Tensor, kv_in: Tensor, allow: np.ndarray | None, model: SemAIM, name: str) -> Tensor:
    """Multi-head attention; ``allow`` is (B, Tq, Tk) with rows as queries.

    Query rows with no visible key produce a zero attention output.
    """
    heads = model.config.heads
    b, tq, d = q_in.shape
    q = _split_heads(_linear(q_in, model, f"{name}.q"), heads)
    k = _split_heads(_linear(kv_in, model, f"{name}.k"), heads)
    v = _split_heads(_linear(kv_in, model, f"{name}.v"), heads)
    scores = nx.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // heads))
    if allow is not None:
        scores = nx.mask_scores(scores, allow[:, None, :, :])
    probs = nx.softmax_lastdim(scores)
    if allow is not None:
        row_any = allow.any(axis=-1)
        if not row_any.all():
            probs = probs * Tensor(row_any[:, None, :, None].astype(probs.dtype))
    out = nx.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, tq, d)
    return _linear(out, model, f"{name}.proj")


def _stack_allow(mask, batch: int, size: int, kind: str) -> np.ndarray | None:
    if mask is None:
        return None
    masks = mask if isinstance(mask, (list, tuple)) else [mask]
    for m in masks:
        if m.kind != kind:
            raise ContractError(f"expected a {kind} mask, got a {m.kind} mask")
    allow = np.stack([np.asarray(m.allow, dtype=bool) for m in masks])
    if allow.shape[1:] != (size, size):
        raise ContractError(f"{kind} mask of size {allow.shape[1:]} does not match {size} tokens")
    if allow.shape[0] not in (1, batch):
        raise ContractError(f"got {allow.shape[0]} masks for a batch of {batch}")
    return np.broadcast_to(allow, (batch, size, size))


def _as_batch(x: Tensor) -> Tensor:
    return x if x.ndim == 3 else x.reshape(1, *x.shape)


def embed(patches, model: SemAIM) -> Tensor:
    """[cls; patches @ W + b] + pos for a (B, N, P*P*C) or (N, P*P*C) input."""
    if not isinstance(patches, Tensor):
        patches = Tensor(np.asarray(patches, dtype=model.dtype))
    single = patches.ndim == 2
    patches = _as_batch(patches)
    b, n, _ = patches.shape
    if n != model.config.num_patches or patches.shape[2] != model.config.patch_dim:
        raise DimensionError(
            f"patches {patches.shape[1:]} do not match config ({model.config.num_patches}, {model.config.patch_dim})"
        )
    x = _linear(patches, model, "patch_embed")
    cls = model["cls_token"].reshape(1, 1, -1) * Tensor(np.ones((b, 1, 1), dtype=model.dtype))
    tokens = nx.concat([cls, x], axis=1) + model.pos
    return tokens[0] if single else tokens


def encoder_block(x: Tensor, allow, model: SemAIM, layer: int) -> Tensor:
    name = f"encoder.{layer}"
    h = _norm(x, model, f"{name}.norm1")
    x = x + _attention(h, h, allow, model, f"{name}.attn")
    return x + _mlp(_norm(x, model, f"{name}.norm2"), model, f"{name}.mlp")


def decoder_block(g: Tensor, h: Tensor, allow, model: SemAIM, layer: int) -> Tensor:
    name = f"decoder.{layer}"
    q = _norm(g, model, f"{name}.norm_q")
    kv = _norm(h, model, f"{name}.norm_kv")
    g = g + _attention(q, kv, allow, model, f"{name}.attn")
    return g + _mlp(_norm(g, model, f"{name}.norm2"), model, f"{name}.mlp")


def encoder_forward(tokens: Tensor, mask, model: SemAIM, depth: int | None = None) -> list[Tensor]:
    """Outputs of every encoder block; ``mask`` of None means full attention."""
    tokens = _as_batch(tokens)
    allow = _stack_allow(mask, tokens.shape[0], tokens.shape[1], "encoder")
    outputs, x = [], tokens
    for layer in range(depth if depth is not None else model.config.encoder_depth):
        x = encoder_block(x, allow, model, layer)
        outputs.append(x)
    return outputs


def decoder_forward(pos: Tensor, h_layers: Sequence[Tensor], mask, model: SemAIM) -> Tensor:
    """Decoder block k queries the patch tokens of encoder layer ``attachment[k]``."""
    cfg = model.config
    if len(h_layers) != cfg.encoder_depth:
        raise ContractError(f"expected {cfg.encoder_depth} encoder layers, got {len(h_layers)}")
    h_layers = [_as_batch(h) for h in h_layers]
    b, n = h_layers[0].shape[0], cfg.num_patches
    if mask is None:
        raise ContractError("decoder_forward requires a decoder mask")
    allow = _stack_allow(mask, b, n, "decoder")
    pos = pos if isinstance(pos, Tensor) else Tensor(pos)
    g = pos.reshape(1, n, -1) * Tensor(np.ones((b, 1, 1), dtype=pos.dtype))
    for k, layer in enumerate(cfg.attachment):
        h = h_layers[layer]
        g = decoder_block(g, h[:, 1:, :], allow, model, k)
    return g


def head(g: Tensor, model: SemAIM) -> Tensor:
    g = _norm(g, model, "head.norm")
    return _linear(nx.gelu(_linear(g, model, "head.fc1")), model, "head.fc2")


def frozen_similarity_pass(tokens: Tensor, model: SemAIM) -> tuple[np.ndarray, np.ndarray]:
    """Full-attention encoder pass with no gradient; returns ([CLS], patches) arrays."""
    with nx.no_grad():
        outs = encoder_forward(Tensor(_as_batch(tokens).data), None, model, depth=model.config.similarity_layer + 1)
    z = outs[-1].data
    if tokens.ndim == 2:
        return z[0, 0], z[0, 1:]
    return z[:, 0], z[:, 1:]


def forward_from_centerness(patches, centerness: np.ndarray, model: SemAIM) -> Tensor:
    """Predictions (B, N, target_dim) for explicit per-sample centerness (B, N)."""
    tokens = _as_batch(embed(patches, model))
    centerness = np.atleast_2d(np.asarray(centerness, dtype=np.float64))
    return _forward_tokens(tokens, centerness, model)


def _forward_tokens(tokens: Tensor, centerness: np.ndarray, model: SemAIM) -> Tensor:
    enc = [og.encoder_mask(c, include_cls=True) for c in centerness]
    dec = [og.decoder_mask(c) for c in centerness]
    h_layers = encoder_forward(tokens, enc, model)
    g = decoder_forward(model.pos[1:], h_layers, dec, model)
    return head(g, model)


@dataclass
class ForwardResult:
    predictions: Tensor
    permutations: list[og.Permutation]
    similarity: list[og.SimilarityMap] | None
    centerness: np.ndarray


def forward(images, strategy, model: SemAIM, rng: np.random.Generator) -> ForwardResult:
    """Patchify, embed, order, then run the masked encoder, decoder and head.

    ``images`` is (B, H, W, C) or (H, W, C). Similarity-driven strategies run a
    frozen full-attention pass first. One child generator per sample supplies
    that sample's order randomness.
    """
    strategy = og.OrderStrategy.parse(strategy)
    cfg = model.config
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    patches = Tensor(patchify(images, cfg.patch_size).astype(model.dtype))
    tokens = embed(patches, model)
    b, n = images.shape[0], cfg.num_patches
    sims = None
    if strategy.needs_similarity:
        z_cls, z_patches = frozen_similarity_pass(tokens, model)
        sims = [og.similarity_map(z_cls[i], z_patches[i], cfg.grid) for i in range(b)]
    rngs = rng.spawn(b)
    centerness = np.stack(
        [
            og.order_centerness(strategy, n, rngs[i], sims[i] if sims else None, cfg.order_lambda).values
            for i in range(b)
        ]
    )
    preds = _forward_tokens(tokens, centerness, model)
    perms = [og.permutation_from_centerness(c) for c in centerness]
    return ForwardResult(preds, perms, sims, centerness)


def cls_features(images, model: SemAIM) -> np.ndarray:
    """Final-block [CLS] tokens from a full unmasked forward, (B, D)."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    with nx.no_grad():
        tokens = embed(patchify(images, model.config.patch_size).astype(model.dtype), model)
        z = encoder_forward(tokens, None, model)[-1]
    return np.asarray(z.data[:, 0], dtype=np.float64)
