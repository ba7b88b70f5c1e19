"""Deterministic chunked execution.

Work is split into chunks whose boundaries depend only on the problem size,
never on the worker count, and partial results are combined by a fixed
pairwise tree.  A run with one worker and a run with many therefore produce
bit-identical sums.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
ENV_VAR = "GAUSSFLOW_PARALLELISM"


def parallelism() -> int:
    raw = os.environ.get(ENV_VAR, "").strip()
    if raw:
        try:
            width = int(raw)
        except ValueError:
            raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
        if width < 1:
            raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
        return width
    return os.cpu_count() or 1


def chunks(total: int, size: int) -> list[tuple[int, int]]:
    return [(s, min(s + size, total)) for s in range(0, total, size)]


def chunk_map(fn: Callable[[T], object], items: Sequence[T], workers: int | None = None) -> list:
    """``[fn(item) for item in items]``, possibly on a thread pool, in input order."""
    workers = parallelism() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def tree_sum(parts: Sequence):
    """Pairwise sum of a sequence in a fixed order."""
    parts = list(parts)
    if not parts:
        raise ValueError("empty sum")
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def pairwise_sum(x: np.ndarray, axis: int = 0, leaf: int = 64) -> np.ndarray:
    """Pairwise summation along ``axis`` with a layout-independent order."""
    x = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    n = x.shape[0]
    if n == 0:
        return np.zeros(x.shape[1:])
    leaves = [x[s:e].sum(axis=0) if e - s > 1 else x[s].copy() for s, e in chunks(n, leaf)]
    # np.sum over a small contiguous leading block is sequential per output element
    return tree_sum(leaves)


def mean_se(values: np.ndarray) -> tuple[float, float]:
    """Pairwise-summed mean and the standard error of the mean."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    if n == 0:
        return float("nan"), float("nan")
    mean = float(pairwise_sum(values) / n)
    se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    return mean, se
