"""Execution controls: deterministic mode and thread caps for the BLAS pool."""

from __future__ import annotations

import os

from threadpoolctl import threadpool_limits

_state = {"deterministic": False, "limiter": None}


def limit_threads(count: int | None) -> None:
    """Cap native thread pools at ``count`` threads (``None`` lifts the cap)."""
    limiter = _state["limiter"]
    if limiter is not None:
        limiter.restore_original_limits()
        _state["limiter"] = None
    if count is not None:
        _state["limiter"] = threadpool_limits(limits=max(int(count), 1))


def set_deterministic(flag: bool) -> None:
    """Pin reductions to a single thread so repeated runs are bit-identical."""
    _state["deterministic"] = bool(flag)
    if flag:
        limit_threads(1)
    else:
        env = os.environ.get("SEMAIM_THREADS")
        limit_threads(int(env) if env else None)


def is_deterministic() -> bool:
    return _state["deterministic"]
