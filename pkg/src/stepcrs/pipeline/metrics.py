from __future__ import annotations

import logging
from typing import Iterable, Sequence

log = logging.getLogger(__name__)


def recall_at_k(ranked_lists: Sequence[Sequence[int]], gold_sets: Sequence[Iterable[int]], k: int,
                num_items: int | None = None) -> float:
    """Mean over turns of |gold & top-k| / |gold|; turns with empty gold are skipped."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if num_items is not None and k > num_items:
        log.warning("recall@%d requested with only %d items; clamping k", k, num_items)
        k = num_items
    total, n = 0.0, 0
    for ranked, gold in zip(ranked_lists, gold_sets):
        gold = set(gold)
        if not gold:
            continue
        total += len(gold & set(list(ranked)[:k])) / len(gold)
        n += 1
    return total / n if n else 0.0


def distinct_n(responses: Sequence[str], n: int) -> float:
    """Corpus-level distinct word n-grams over total word n-grams."""
    if n < 1:
        raise ValueError("n must be >= 1")
    grams: set[tuple[str, ...]] = set()
    count = 0
    for r in responses:
        words = r.split()
        for i in range(len(words) - n + 1):
            grams.add(tuple(words[i:i + n]))
            count += 1
    if count == 0:
        log.warning("distinct-%d over a corpus with no %d-grams", n, n)
        return 0.0
    return len(grams) / count
