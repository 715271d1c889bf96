"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from semaim.errors import ContractError
from semaim.numerics.tensor import Tape, Tensor, no_grad


def _evaluate(f, params) -> float:
    with no_grad():
        return float(f(params).data.reshape(()))


def finite_diff_errors(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Worst relative error per parameter between backward() and central differences.

    With ``max_coords`` set, that many coordinates are sampled per parameter
    (all of them when the parameter is smaller). The relative error of one
    coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if not h > 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    params = list(params)
    with Tape() as tape:
        tape.watch(*params)
        loss = f(params)
    grads = tape.backward(loss)

    base = _evaluate(f, params)
    if _evaluate(f, params) != base:
        raise ContractError("objective is not deterministic under repeated evaluation")

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = []
    for p in params:
        analytic = grads[p].data.reshape(-1)
        original = p.data
        flat_count = original.size
        if max_coords is None or max_coords >= flat_count:
            coords = np.arange(flat_count)
        else:
            coords = rng.choice(flat_count, size=max_coords, replace=False)
        err = 0.0
        try:
            for k in coords:
                bumped = original.copy().reshape(-1)
                bumped[k] += h
                p.data = bumped.reshape(original.shape)
                up = _evaluate(f, params)
                bumped[k] -= 2 * h
                p.data = bumped.reshape(original.shape)
                down = _evaluate(f, params)
                numeric = (up - down) / (2 * h)
                a = float(analytic[k])
                err = max(err, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
        finally:
            p.data = original
        worst.append(err)
    return worst


def finite_diff_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Maximum relative gradient error over all checked coordinates."""
    errors = finite_diff_errors(f, params, h=h, max_coords=max_coords, rng=rng)
    return max(errors, default=0.0)
