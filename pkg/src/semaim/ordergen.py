"""Patch orderings and the attention masks they induce.

The semantic ordering runs: similarity map between the summary token and the
patch tokens, 3x3 mean filter, argmax center, Euclidean distance to the
center, distance plus small uniform noise (the centerness), argsort.
Any ordering is turned into a centerness vector so the two attention masks
can be derived from one representation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from semaim.errors import ContractError, NumericError

DEFAULT_LAMBDA = 0.01
CLS_CENTERNESS = -1.0


class OrderStrategy(str, enum.Enum):
    RASTER = "raster"
    STOCHASTIC = "stochastic"
    SIMILARITY = "similarity"
    SEMANTIC = "semantic"

    @classmethod
    def parse(cls, value) -> OrderStrategy:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ContractError(f"unknown order strategy {value!r}; valid: {{{valid}}}") from None

    @property
    def needs_similarity(self) -> bool:
        return self in (OrderStrategy.SIMILARITY, OrderStrategy.SEMANTIC)


@dataclass(frozen=True)
class SimilarityMap:
    values: np.ndarray  # (H', W')

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


@dataclass(frozen=True)
class Centerness:
    values: np.ndarray  # (N,)
    lam: float = 0.0
    center: tuple[int, int] | None = None


@dataclass(frozen=True)
class Permutation:
    order: np.ndarray

    def __post_init__(self):
        order = np.asarray(self.order)
        if order.ndim != 1 or not np.array_equal(np.sort(order), np.arange(order.size)):
            raise ContractError(f"not a permutation of 0..{order.size - 1}: {order.tolist()}")
        object.__setattr__(self, "order", order.astype(np.int64))

    def __len__(self) -> int:
        return self.order.size

    def ranks(self) -> np.ndarray:
        ranks = np.empty_like(self.order)
        ranks[self.order] = np.arange(self.order.size)
        return ranks


@dataclass(frozen=True)
class AttentionMask:
    allow: np.ndarray  # (T, T) bool, row = query
    kind: str = field(default="encoder")

    def __post_init__(self):
        if self.kind not in ("encoder", "decoder"):
            raise ContractError(f"mask kind must be encoder or decoder, got {self.kind!r}")


def _values(c) -> np.ndarray:
    return np.asarray(c.values if isinstance(c, Centerness) else c, dtype=np.float64)


def _square_grid(n: int) -> tuple[int, int]:
    side = math.isqrt(n)
    if side * side != n:
        raise ContractError(f"cannot infer a square grid for {n} patches; pass grid explicitly")
    return side, side


def similarity_map(z_cls, z_patches, grid: tuple[int, int] | None = None) -> SimilarityMap:
    z_cls = np.asarray(z_cls, dtype=np.float64)
    z_patches = np.asarray(z_patches, dtype=np.float64)
    n = z_patches.shape[0]
    grid = grid or _square_grid(n)
    if grid[0] * grid[1] != n:
        raise ContractError(f"grid {grid} does not hold {n} patches")
    cls_norm = np.linalg.norm(z_cls)
    if cls_norm == 0:
        raise NumericError("zero-norm [CLS] token; cosine similarity undefined")
    norms = np.linalg.norm(z_patches, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise NumericError(f"zero-norm patch token at index {int(zero[0])}; cosine similarity undefined")
    cos = (z_patches @ z_cls) / (norms * cls_norm)
    e = np.exp(cos - cos.max())
    return SimilarityMap((e / e.sum()).reshape(grid))


def mean_filter_3x3(s: SimilarityMap) -> SimilarityMap:
    """Zero-padded 3x3 box sum divided by a constant 9."""
    padded = np.pad(s.values, 1)
    h, w = s.grid
    total = np.zeros((h, w))
    for dy in range(3):
        for dx in range(3):
            total += padded[dy : dy + h, dx : dx + w]
    return SimilarityMap(total / 9.0)


def find_center(s_filtered: SimilarityMap) -> tuple[int, int]:
    # np.argmax returns the first maximal index in row-major order
    flat = int(np.argmax(s_filtered.values))
    return divmod(flat, s_filtered.grid[1])


def distance_map(center: tuple[int, int], grid: tuple[int, int]) -> np.ndarray:
    cy, cx = center
    h, w = grid
    if not (0 <= cy < h and 0 <= cx < w):
        raise ContractError(f"center {center} lies outside grid {grid}")
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.sqrt((cy - ii) ** 2.0 + (cx - jj) ** 2.0)


def centerness(d, rng: np.random.Generator, lam: float = DEFAULT_LAMBDA, center=None) -> Centerness:
    if lam < 0:
        raise ContractError(f"lambda must be non-negative, got {lam}")
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    noise = rng.random(d.size)
    return Centerness(d + lam * noise, lam=lam, center=center)


def permutation_from_centerness(c) -> Permutation:
    values = _values(c)
    if np.unique(values).size != values.size:
        raise ContractError("centerness has duplicate entries; ordering is ambiguous")
    return Permutation(np.argsort(values, kind="stable"))


def raster_order(n: int) -> Permutation:
    return Permutation(np.arange(n))


def stochastic_order(n: int, rng: np.random.Generator) -> Permutation:
    return Permutation(rng.permutation(n))


def similarity_order(s: SimilarityMap, rng: np.random.Generator, lam: float = DEFAULT_LAMBDA) -> Permutation:
    """Most similar patch first; ``lam`` scales uniform tie-breaking noise."""
    scores = s.flat + lam * rng.random(s.flat.size)
    return Permutation(np.argsort(-scores, kind="stable"))


def semantic_centerness(s: SimilarityMap, rng: np.random.Generator, lam: float = DEFAULT_LAMBDA) -> Centerness:
    center = find_center(mean_filter_3x3(s))
    return centerness(distance_map(center, s.grid), rng, lam, center=center)


def centerness_for_order(p: Permutation) -> Centerness:
    if not isinstance(p, Permutation):
        p = Permutation(np.asarray(p))
    return Centerness(p.ranks().astype(np.float64))


def order_centerness(
    strategy,
    n: int,
    rng: np.random.Generator,
    sim: SimilarityMap | None = None,
    lam: float = DEFAULT_LAMBDA,
) -> Centerness:
    """Centerness for any strategy; similarity-driven ones need ``sim``."""
    strategy = OrderStrategy.parse(strategy)
    if strategy is OrderStrategy.RASTER:
        return centerness_for_order(raster_order(n))
    if strategy is OrderStrategy.STOCHASTIC:
        return centerness_for_order(stochastic_order(n, rng))
    if sim is None:
        raise ContractError(f"strategy {strategy.value} requires a similarity map")
    if strategy is OrderStrategy.SIMILARITY:
        return centerness_for_order(similarity_order(sim, rng, lam))
    return semantic_centerness(sim, rng, lam)


def with_cls(c) -> np.ndarray:
    """Prepend the [CLS] centerness so every patch may attend to it."""
    return np.concatenate([[CLS_CENTERNESS], _values(c)])


def encoder_mask(c, include_cls: bool = False) -> AttentionMask:
    v = with_cls(c) if include_cls else _values(c)
    return AttentionMask(v[:, None] >= v[None, :], kind="encoder")


def decoder_mask(c) -> AttentionMask:
    v = _values(c)
    return AttentionMask(v[:, None] > v[None, :], kind="decoder")
