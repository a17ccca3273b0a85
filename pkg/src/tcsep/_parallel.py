"""Ordered thread fan-out: results merge in input order, so outputs are
bit-identical regardless of worker count."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


def ordered_map(fn, items, n_threads: int = 1) -> list:
    items = list(items)
    if n_threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(fn, items))
