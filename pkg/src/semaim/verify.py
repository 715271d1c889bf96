"""Oracle verification suites shared by the CLI and the acceptance tests.

Each suite returns a list of :class:`CaseResult`; a suite passes when every
case does. Magnitudes are the worst observed error of each case.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from semaim import numerics as nx
from semaim import ordergen as og
from semaim.model import ModelConfig, SemAIM, embed, forward, forward_from_centerness, frozen_similarity_pass, patchify
from semaim.numerics import Tape, Tensor
from semaim.objective import mse_loss
from semaim.reference import sequential_reference_forward

EQUIVALENCE_TOL = 1e-5
CAUSALITY_TOL = 1e-9
GRADCHECK_TOL = 1e-4
GRADCHECK_STEP = 1e-4

SUITES = ("gradcheck", "causality", "equivalence", "permutations", "masks")


@dataclass
class CaseResult:
    name: str
    passed: bool
    magnitude: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: {self.magnitude:.3e}{extra}"


def tiny_config(decoder_depth: int = 2, encoder_depth: int = 2, **overrides) -> ModelConfig:
    """N=16 patches (16x16 image, 4px patches), D=32, 4 heads."""
    params = dict(
        image_size=(16, 16),
        patch_size=4,
        channels=3,
        embed_dim=32,
        encoder_depth=encoder_depth,
        decoder_depth=decoder_depth,
        heads=4,
        mlp_ratio=2.0,
    )
    params.update(overrides)
    return ModelConfig(**params)


def random_tiny_config(rng: np.random.Generator) -> ModelConfig:
    grid = int(rng.integers(1, 5))
    patch = int(rng.choice([1, 2, 3]))
    dim = int(rng.choice([8, 16, 24, 32]))
    heads = int(rng.choice([h for h in (1, 2, 4) if dim % h == 0]))
    depth = int(rng.integers(1, 4))
    return ModelConfig(
        image_size=(grid * patch, grid * patch),
        patch_size=patch,
        channels=int(rng.integers(1, 4)),
        embed_dim=dim,
        encoder_depth=depth,
        decoder_depth=int(rng.integers(1, depth + 1)),
        heads=heads,
        mlp_ratio=float(rng.choice([1.0, 2.0])),
    )


def _perturbed_model(config: ModelConfig, seed: int) -> SemAIM:
    """Model with non-trivial biases and norm affines so every path is exercised."""
    with nx.default_dtype(np.float64):
        model = SemAIM.create(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, p in model.params.items():
        if p.ndim == 1:
            model.params[name] = Tensor(p.data + 0.1 * rng.standard_normal(p.shape), requires_grad=True)
    return model


def _images(config: ModelConfig, count: int, seed: int) -> np.ndarray:
    h, w = config.image_size
    return np.random.default_rng(seed).random((count, h, w, config.channels))


def _sample_centerness(model: SemAIM, images: np.ndarray, strategy, seed: int) -> np.ndarray:
    cfg = model.config
    patches = patchify(images, cfg.patch_size)
    sims = None
    if og.OrderStrategy.parse(strategy).needs_similarity:
        z_cls, z_p = frozen_similarity_pass(embed(patches, model), model)
        sims = [og.similarity_map(z_cls[i], z_p[i], cfg.grid) for i in range(len(images))]
    rngs = np.random.default_rng(seed).spawn(len(images))
    return np.stack(
        [
            og.order_centerness(strategy, cfg.num_patches, rngs[i], sims[i] if sims else None).values
            for i in range(len(images))
        ]
    )


def equivalence_suite(num_configs: int = 20, seed: int = 0, configs=None, samples: int = 2) -> list[CaseResult]:
    """Masked parallel forward vs. the sequential reference, every strategy."""
    rng = np.random.default_rng(seed)
    if configs is None:
        configs = [random_tiny_config(rng) for _ in range(num_configs)]
    results = []
    for index, cfg in enumerate(configs):
        model = _perturbed_model(cfg, seed=seed + index)
        images = _images(cfg, samples, seed + 100 + index)
        for strategy in og.OrderStrategy:
            out = forward(images, strategy, model, np.random.default_rng([seed, index]))
            worst = 0.0
            for b in range(samples):
                ref = sequential_reference_forward(images[b], out.permutations[b], model)
                worst = max(worst, float(np.abs(ref - out.predictions.data[b]).max()))
            label = (
                f"config{index} N={cfg.num_patches} D={cfg.embed_dim} "
                f"L={cfg.encoder_depth} L'={cfg.decoder_depth} {strategy.value}"
            )
            results.append(CaseResult(f"equivalence {label}", worst < EQUIVALENCE_TOL, worst))
    return results


def jacobian_blocks(model: SemAIM, image: np.ndarray, centerness: np.ndarray) -> np.ndarray:
    """max |d pred[i, :] / d patch[j, :]| for every (i, j), via reverse mode."""
    cfg = model.config
    patches = Tensor(patchify(image, cfg.patch_size)[None].astype(np.float64), requires_grad=True)
    with Tape() as tape:
        tape.watch(patches)
        preds = forward_from_centerness(patches, centerness[None], model)
    n, t = cfg.num_patches, cfg.target_dim
    blocks = np.zeros((n, n))
    for i in range(n):
        for c in range(t):
            cot = np.zeros(preds.shape)
            cot[0, i, c] = 1.0
            g = tape.vjp(preds, cot)[patches].data[0]
            blocks[i] = np.maximum(blocks[i], np.abs(g).max(axis=1))
    return blocks


def causality_suite(config: ModelConfig | None = None, seed: int = 0, strategies=None) -> list[CaseResult]:
    """Predictions must be exactly insensitive to the patch itself and later patches."""
    config = config or tiny_config()
    model = _perturbed_model(config, seed)
    strategies = strategies or list(og.OrderStrategy)
    results = []
    for s_index, strategy in enumerate(strategies):
        image = _images(config, 1, seed + 7 + s_index)
        c = _sample_centerness(model, image, strategy, seed + s_index)[0]
        order = og.permutation_from_centerness(c).order
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        blocks = jacobian_blocks(model, image[0], c)
        future = rank[None, :] >= rank[:, None]  # [i, j]: patch j at or after patch i
        leak = float(blocks[future].max())
        past = blocks[~future]
        floor = float(past.min()) if past.size else 0.0
        results.append(
            CaseResult(
                f"causality jacobian {strategy.value}",
                leak <= CAUSALITY_TOL and (past.size == 0 or floor > 0),
                leak,
                f"smallest earlier-patch sensitivity {floor:.2e}",
            )
        )
        results.append(_perturbation_case(model, image[0], c, order, strategy, seed))
        results.append(_finite_difference_case(model, image[0], c, order, strategy, seed))
    return results


def _finite_difference_case(model, image, c, order, strategy, seed, pairs: int = 6, h: float = 1e-4) -> CaseResult:
    """Central differences of prediction pi_i w.r.t. single pixels of patch pi_j, j >= i."""
    cfg = model.config
    base_patches = patchify(image, cfg.patch_size)
    rng = np.random.default_rng(seed + 11)
    n = order.size
    worst = 0.0
    for _ in range(pairs):
        i = int(rng.integers(0, n))
        j = int(rng.integers(i, n))
        coord = int(rng.integers(0, base_patches.shape[1]))
        outs = []
        for sign in (1.0, -1.0):
            patches = base_patches.copy()
            patches[order[j], coord] += sign * h
            outs.append(forward_from_centerness(patches[None], c[None], model).data[0, order[i]])
        worst = max(worst, float(np.abs(outs[0] - outs[1]).max() / (2 * h)))
    return CaseResult(f"causality finite differences {strategy.value}", worst <= CAUSALITY_TOL, worst,
                      f"{pairs} (i, j>=i) pairs")


def _perturbation_case(model, image, c, order, strategy, seed) -> CaseResult:
    cfg = model.config
    base_patches = patchify(image, cfg.patch_size)
    base = forward_from_centerness(base_patches[None], c[None], model).data[0]
    rng = np.random.default_rng(seed)
    worst = 0.0
    positions = sorted(set(rng.integers(0, order.size, size=min(4, order.size)).tolist()) | {0})
    for pos in positions:
        patches = base_patches.copy()
        patches[order[pos]] += rng.normal(0, 0.5, size=patches.shape[1])
        moved = forward_from_centerness(patches[None], c[None], model).data[0]
        affected = order[: pos + 1]
        worst = max(worst, float(np.abs(moved[affected] - base[affected]).max()))
    return CaseResult(f"causality perturbation {strategy.value}", worst <= CAUSALITY_TOL, worst)


def gradcheck_suite(config: ModelConfig | None = None, seed: int = 0, max_coords: int | None = 3,
                    strategy="semantic") -> list[CaseResult]:
    """Full-model loss gradient vs. central differences for every parameter tensor."""
    config = config or tiny_config()
    model = _perturbed_model(config, seed)
    images = _images(config, 2, seed + 3)
    patches = patchify(images, config.patch_size)
    target = np.random.default_rng(seed + 4).random((2, config.num_patches, config.target_dim))
    c = _sample_centerness(model, images, strategy, seed)
    names = list(model.params)

    def loss_fn(params):
        for name, p in zip(names, params):
            model.params[name] = p
        return mse_loss(forward_from_centerness(patches, c, model), Tensor(target))

    params = [model.params[n] for n in names]
    errors = nx.finite_diff_errors(
        loss_fn, params, h=GRADCHECK_STEP, max_coords=max_coords, rng=np.random.default_rng(seed)
    )
    groups: dict[str, float] = {}
    for name, err in zip(names, errors):
        group = name.rsplit(".", 1)[0] if "." in name else name
        groups[group] = max(groups.get(group, 0.0), err)
    return [CaseResult(f"gradcheck {g}", e < GRADCHECK_TOL, e) for g, e in groups.items()]


def min_distance_gap(h: int, w: int) -> float:
    """Smallest positive gap between distinct patch-to-center distances on a grid."""
    dists = sorted({math.hypot(a, b) for a in range(h) for b in range(w)})
    return min((q - p for p, q in zip(dists, dists[1:])), default=math.inf)


def permutations_suite(trials: int = 10_000, seed: int = 0, max_side: int = 14) -> list[CaseResult]:
    """Bijection checks for every strategy and ring-order preservation for semantic order."""
    rng = np.random.default_rng(seed)
    strategies = list(og.OrderStrategy)
    invalid = 0
    reordered = 0
    for trial in range(trials):
        h, w = (int(v) for v in rng.integers(1, max_side + 1, size=2))
        n = h * w
        strategy = strategies[trial % len(strategies)]
        sim = None
        if strategy.needs_similarity:
            z = rng.standard_normal((n + 1, 8))
            sim = og.similarity_map(z[0], z[1:], (h, w))
        c = og.order_centerness(strategy, n, rng, sim)
        try:
            perm = og.permutation_from_centerness(c)
        except Exception:
            invalid += 1
            continue
        if strategy is og.OrderStrategy.SEMANTIC:
            d = og.distance_map(c.center, (h, w)).reshape(-1)[perm.order]
            if np.any(np.diff(d) < -1e-12):
                reordered += 1
    gaps = {side: min_distance_gap(side, side) for side in range(2, max_side + 1)}
    worst_gap = min(gaps.values())
    return [
        CaseResult("permutations bijective", invalid == 0, float(invalid), f"{trials} trials"),
        CaseResult("semantic order preserves distance rings", reordered == 0, float(reordered)),
        CaseResult(
            "min distinct-distance gap exceeds lambda",
            worst_gap > og.DEFAULT_LAMBDA,
            worst_gap,
            f"grids up to {max_side}x{max_side}",
        ),
    ]


def masks_suite(trials: int = 1000, seed: int = 0) -> list[CaseResult]:
    """Masks reordered into permutation order are (strictly) lower-triangular."""
    rng = np.random.default_rng(seed)
    bad_enc = bad_dec = 0
    for _ in range(trials):
        n = int(rng.integers(1, 60))
        c = og.centerness(rng.random(n) * 5, rng)
        order = og.permutation_from_centerness(c).order
        enc = og.encoder_mask(c).allow[np.ix_(order, order)]
        dec = og.decoder_mask(c).allow[np.ix_(order, order)]
        lower = np.tril(np.ones((n, n), dtype=bool))
        bad_enc += not np.array_equal(enc, lower)
        bad_dec += not np.array_equal(dec, np.tril(lower, -1))
    return [
        CaseResult("encoder mask lower-triangular with unit diagonal", bad_enc == 0, float(bad_enc)),
        CaseResult("decoder mask strictly lower-triangular", bad_dec == 0, float(bad_dec)),
    ]


def run_suite(name: str, **kwargs) -> list[CaseResult]:
    suites = {
        "gradcheck": gradcheck_suite,
        "causality": causality_suite,
        "equivalence": equivalence_suite,
        "permutations": permutations_suite,
        "masks": masks_suite,
    }
    if name not in suites:
        raise KeyError(f"unknown suite {name!r}; valid: {', '.join(SUITES)}")
    return suites[name](**kwargs)
