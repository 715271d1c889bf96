"""Frozen-feature evaluation: weighted k-NN and a linear softmax probe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from semaim.errors import ContractError


def knn_probe(features, labels, k: int = 20, temperature: float = 0.07, num_classes: int | None = None) -> float:
    """Leave-one-out accuracy of a cosine-similarity k-NN vote.

    Each of the k nearest neighbours votes for its label with weight
    ``exp(similarity / temperature)``.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    m = x.shape[0]
    if not 1 <= k <= m - 1:
        raise ContractError(f"k must lie in [1, {m - 1}] for {m} samples, got {k}")
    num_classes = num_classes or int(y.max()) + 1
    x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    sim = x @ x.T
    np.fill_diagonal(sim, -np.inf)
    nearest = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    weights = np.exp(np.take_along_axis(sim, nearest, axis=1) / temperature)
    votes = np.zeros((m, num_classes))
    np.add.at(votes, (np.arange(m)[:, None], y[nearest]), weights)
    return float((votes.argmax(axis=1) == y).mean())


@dataclass(frozen=True)
class ProbeConfig:
    test_fraction: float = 0.3
    epochs: int = 300
    lr: float = 0.05
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ContractError("test_fraction must lie in (0, 1)")


def split_indices(m: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(m)
    n_test = max(1, int(round(m * test_fraction)))
    return order[n_test:], order[:n_test]


def linear_probe(features, labels, config: ProbeConfig = ProbeConfig(), num_classes: int | None = None) -> float:
    """Top-1 held-out accuracy of a softmax-regression probe on frozen features.

    Features are standardized with training-split statistics; the probe is
    trained full-batch with Adam on cross-entropy.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    num_classes = num_classes or int(y.max()) + 1
    train_idx, test_idx = split_indices(x.shape[0], config.test_fraction, config.seed)
    mu = x[train_idx].mean(axis=0)
    sd = x[train_idx].std(axis=0) + 1e-6
    xs = (x - mu) / sd
    xt, yt = xs[train_idx], y[train_idx]
    onehot = np.eye(num_classes)[yt]

    rng = np.random.default_rng(config.seed)
    w = rng.normal(0, 0.01, size=(x.shape[1], num_classes))
    b = np.zeros(num_classes)
    mw, vw, mb, vb = (np.zeros_like(w), np.zeros_like(w), np.zeros_like(b), np.zeros_like(b))
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, config.epochs + 1):
        logits = xt @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        d = (p - onehot) / len(yt)
        gw = xt.T @ d + config.weight_decay * w
        gb = d.sum(axis=0)
        mw = b1 * mw + (1 - b1) * gw
        vw = b2 * vw + (1 - b2) * gw * gw
        mb = b1 * mb + (1 - b1) * gb
        vb = b2 * vb + (1 - b2) * gb * gb
        w -= config.lr * (mw / (1 - b1**t)) / (np.sqrt(vw / (1 - b2**t)) + eps)
        b -= config.lr * (mb / (1 - b1**t)) / (np.sqrt(vb / (1 - b2**t)) + eps)
    pred = (xs[test_idx] @ w + b).argmax(axis=1)
    return float((pred == y[test_idx]).mean())
