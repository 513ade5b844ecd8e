from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stepcrs.pipeline.metrics import distinct_n, recall_at_k


def recall_oracle(ranked, gold, k):
    vals = []
    for r, g in zip(ranked, gold):
        if not g:
            continue
        hit = 0
        for item in set(g):
            for pos in range(min(k, len(r))):
                if r[pos] == item:
                    hit += 1
                    break
        vals.append(Fraction(hit, len(set(g))))
    return float(sum(vals, Fraction(0)) / len(vals)) if vals else 0.0


def distinct_oracle(responses, n):
    grams, total = [], 0
    for r in responses:
        w = r.split()
        for i in range(len(w) - n + 1):
            g = " ".join(w[i:i + n])
            total += 1
            if g not in grams:
                grams.append(g)
    return len(grams) / total if total else 0.0


def test_distinct_worked_value():
    assert distinct_n(["a b a b"], 2) == 2 / 3
    assert distinct_n(["a a a"], 1) == 1 / 3
    assert distinct_n(["a"], 2) == 0.0


def test_recall_worked_values():
    assert recall_at_k([[3, 1, 2]], [[1]], 1) == 0.0
    assert recall_at_k([[3, 1, 2]], [[1]], 2) == 1.0
    assert recall_at_k([[3, 1, 2], [5]], [[1, 9], []], 3) == 0.5
    with pytest.raises(ValueError):
        recall_at_k([[1]], [[1]], 0)


def test_recall_clamps_k():
    assert recall_at_k([[0, 1]], [[1]], 50, num_items=2) == 1.0


@pytest.mark.parametrize("seed", range(200))
def test_recall_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(5, 40))
    n = int(rng.integers(1, 12))
    ranked = [list(rng.permutation(m)) for _ in range(n)]
    gold = [list(rng.choice(m, size=int(rng.integers(0, 4)), replace=False)) for _ in range(n)]
    prev = -1.0
    for k in (1, 2, 5, 10, m):
        got = recall_at_k(ranked, gold, k)
        assert got == pytest.approx(recall_oracle(ranked, gold, k), abs=1e-12)
        assert got >= prev
        prev = got


@pytest.mark.parametrize("seed", range(200))
def test_distinct_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    words = ["a", "b", "c", "d", "e"][: int(rng.integers(1, 6))]
    responses = [" ".join(rng.choice(words, size=int(rng.integers(0, 8)))) for _ in range(int(rng.integers(1, 6)))]
    for n in (1, 2, 3, 4):
        assert distinct_n(responses, n) == pytest.approx(distinct_oracle(responses, n), abs=1e-15)


@given(st.lists(st.text(alphabet="xyz ", max_size=12), min_size=1, max_size=5), st.integers(1, 4))
def test_distinct_in_unit_interval(responses, n):
    assert 0.0 <= distinct_n(responses, n) <= 1.0
