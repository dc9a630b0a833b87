"""Ordered utterance-level map with an optional thread pool."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from mmilab.gauss_hmm import ContractError

ENV_JOBS = "MMILAB_JOBS"


def default_jobs() -> int:
    raw = os.environ.get(ENV_JOBS, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ContractError(f"{ENV_JOBS} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ContractError(f"{ENV_JOBS} must be at least 1")
    return n


def ordered_map(fn, items, jobs: int = 1) -> list:
    """``[fn(x) for x in items]``; results keep input order for any ``jobs``."""
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))
