"""Alignment objectives for the fused queries and their curriculum schedule.

Task 1 is a bidirectional, label-smoothed cross-entropy over max-pooled
query/text similarities plus a batch-hard hinge; Task 2 a batch-hard triplet
loss between pooled queries and gold-item embeddings; Task 3 a cosine
embedding loss on the same pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (Tensor, cosine_similarity, cross_entropy, l2_normalize, make_op, matmul, max_over_axis,
                       mean, relu, transpose)


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.2
    margin: float = 0.2
    label_smoothing: float = 0.1
    mask_label_collisions: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")


@dataclass
class SimilarityTables:
    s_q2t: Tensor  # (B, B, K): [i, j, k] = Q[i, k] . T[j] / tau
    s_t2q: Tensor  # (B, B, K): [i, j, k] = T[i] . Q[j, k] / tau
    pooled_q2t: Tensor  # (B, B)
    pooled_t2q: Tensor  # (B, B)
    slot_q2t: np.ndarray = field(repr=False, default=None)
    slot_t2q: np.ndarray = field(repr=False, default=None)


def pairwise_similarity(queries: Tensor, texts: Tensor, temperature: float) -> SimilarityTables:
    """Temperature-scaled slot/text dot products, max-pooled over slots.

    Both inputs are expected to be L2-normalised already.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    dots = transpose(matmul(queries, texts.T), (0, 2, 1))  # (B_q, B_t, K)
    s_q2t = dots * (1.0 / temperature)
    s_t2q = transpose(s_q2t, (1, 0, 2))
    pooled_q2t, slot_q2t = max_over_axis(s_q2t, axis=-1)
    pooled_t2q, slot_t2q = max_over_axis(s_t2q, axis=-1)
    return SimilarityTables(s_q2t, s_t2q, pooled_q2t, pooled_t2q, slot_q2t, slot_t2q)


def hardest_negative_index(scores: np.ndarray, labels=None, mask_collisions: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per row, the first column j != i (and label_j != label_i) with the top score.

    Returns (column index, valid flag); rows with no admissible column are invalid.
    """
    b = scores.shape[0]
    allowed = ~np.eye(b, dtype=bool)
    if mask_collisions and labels is not None:
        lab = np.asarray(labels)
        allowed &= lab[:, None] != lab[None, :]
    masked = np.where(allowed, scores, -np.inf)
    idx = np.argmax(masked, axis=1)
    return idx, allowed.any(axis=1)


def _masked_pick(matrix: Tensor, cols: np.ndarray, valid: np.ndarray) -> Tensor:
    """matrix[i, cols[i]] for valid rows and -inf for the rest (no gradient there)."""
    rows = np.arange(matrix.shape[0])
    vals = np.where(valid, matrix.data[rows, cols], -np.inf).astype(matrix.dtype)

    def backward(g):
        full = np.zeros_like(matrix.data)
        np.add.at(full, (rows[valid], cols[valid]), g[valid])
        return (full,)

    return make_op(vals, (matrix,), backward)


def _diagonal(matrix: Tensor) -> Tensor:
    r = np.arange(matrix.shape[0])
    return matrix[(r, r)]


def mine_batch_hard(tables: SimilarityTables, labels=None, mask_collisions: bool = True):
    """Positives (diagonals) and hardest negatives for both directions.

    Returns ``(p_q2t, h_q2t, p_t2q, h_t2q)``; a row whose negatives are all
    masked gets ``-inf`` so its hinge term vanishes.
    """
    out = []
    for pooled in (tables.pooled_q2t, tables.pooled_t2q):
        cols, valid = hardest_negative_index(pooled.data, labels, mask_collisions)
        out.append(_diagonal(pooled))
        out.append(_masked_pick(pooled, cols, valid))
    return tuple(out)


def smoothed_targets(batch: int, smoothing: float, dtype=np.float64) -> np.ndarray:
    if batch < 2:
        return np.ones((batch, batch), dtype=dtype)
    off = smoothing / (batch - 1)
    return (np.full((batch, batch), off) + np.eye(batch) * (1.0 - smoothing - off)).astype(dtype)


def contrastive_ce_loss(pooled_q2t: Tensor, pooled_t2q: Tensor, smoothing: float = 0.1) -> Tensor:
    y = smoothed_targets(pooled_q2t.shape[0], smoothing, pooled_q2t.dtype)
    return (cross_entropy(pooled_q2t, y) + cross_entropy(pooled_t2q, y)) * 0.5


def margin_loss(p_q2t: Tensor, h_q2t: Tensor, p_t2q: Tensor, h_t2q: Tensor, margin: float) -> Tensor:
    b = p_q2t.shape[0]
    hinge = relu(h_q2t - p_q2t + margin) + relu(h_t2q - p_t2q + margin)
    return hinge.sum() * (1.0 / (2 * b))


def triplet_loss(pooled_queries: Tensor, label_embs: Tensor, margin: float, labels=None,
                 mask_collisions: bool = True) -> Tensor:
    """Batch-hard triplet hinge on normalised pooled queries vs. label embeddings."""
    e = l2_normalize(pooled_queries)
    r = l2_normalize(label_embs)
    s = matmul(e, r.T)
    cols, valid = hardest_negative_index(s.data, labels, mask_collisions)
    hinge = relu(_masked_pick(s, cols, valid) - _diagonal(s) + margin)
    return mean(hinge)


def aux_cosine_loss(pooled_queries: Tensor, label_embs: Tensor) -> Tensor:
    return mean(1.0 - cosine_similarity(pooled_queries, label_embs))


# ---------------------------------------------------------------------------
# curriculum


@dataclass(frozen=True)
class CurriculumSchedule:
    e1: int = 2
    e2: int = 3
    en: int = 5

    def __post_init__(self):
        if not 0 <= self.e1 <= self.e2 <= self.en:
            raise ValueError(f"need 0 <= E1 <= E2 <= En, got {self.e1}, {self.e2}, {self.en}")


@dataclass(frozen=True)
class AblationFlags:
    no_curriculum: bool = False
    no_task1: bool = False
    no_task2: bool = False
    no_task3: bool = False

    @property
    def label(self) -> str:
        for name in ("no_curriculum", "no_task1", "no_task2", "no_task3"):
            if getattr(self, name):
                return {"no_curriculum": "w/o CL", "no_task1": "w/o Task1",
                        "no_task2": "w/o Task2", "no_task3": "w/o Task3"}[name]
        return "STEP"


def _ramp(e: int, start: int, end: int) -> float:
    if e < start:
        return 0.0
    if end <= start:
        return 1.0
    return min(1.0, (e - start) / (end - start))


def stage_weights(sched: CurriculumSchedule, epoch: int) -> tuple[float, float]:
    """(w_triplet, w_aux) at 0-based ``epoch``; both held at 1 from En on."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return _ramp(epoch, sched.e1, sched.en), _ramp(epoch, sched.e2, sched.en)


def curriculum_loss(losses: dict[str, Tensor], sched: CurriculumSchedule, epoch: int,
                    flags: AblationFlags = AblationFlags()) -> Tensor:
    """L_s1 = ce + margin, then add the ramped triplet and aux terms.

    Zero-weight terms are left out of the graph entirely, so before E1 the
    result is L_s1 bit for bit.
    """
    if flags.no_curriculum:
        w_triplet = w_aux = 1.0
    else:
        w_triplet, w_aux = stage_weights(sched, epoch)
    total = None
    if not flags.no_task1:
        total = losses["ce"] + losses["margin"]
    terms = []
    if not flags.no_task2 and w_triplet != 0.0:
        terms.append(losses["triplet"] if w_triplet == 1.0 else losses["triplet"] * w_triplet)
    if not flags.no_task3 and w_aux != 0.0:
        terms.append(losses["aux"] if w_aux == 1.0 else losses["aux"] * w_aux)
    for t in terms:
        total = t if total is None else total + t
    if total is None:
        ref = next(iter(losses.values()))
        return Tensor(np.zeros((), dtype=ref.dtype))
    return total


def alignment_losses(fused: Tensor, pooled: Tensor, text_cls: Tensor, label_embs: Tensor | None,
                     labels, cfg: ContrastiveConfig, label_rows=None) -> dict[str, Tensor]:
    """All four component losses for one batch.

    ``label_rows`` selects the batch rows that carry a gold item (Tasks 2/3);
    ``label_embs`` holds one embedding per selected row.
    """
    q = l2_normalize(fused)
    t = l2_normalize(text_cls)
    tables = pairwise_similarity(q, t, cfg.temperature)
    out = {"ce": contrastive_ce_loss(tables.pooled_q2t, tables.pooled_t2q, cfg.label_smoothing)}
    labels = None if labels is None else np.asarray(labels)
    p_q2t, h_q2t, p_t2q, h_t2q = mine_batch_hard(tables, labels, cfg.mask_label_collisions)
    out["margin"] = margin_loss(p_q2t, h_q2t, p_t2q, h_t2q, cfg.margin)
    zero = Tensor(np.zeros((), dtype=pooled.dtype))
    if label_embs is None or label_embs.shape[0] == 0:
        out["triplet"] = out["aux"] = zero
        return out
    rows = np.arange(pooled.shape[0]) if label_rows is None else np.asarray(label_rows)
    e = pooled[rows]
    sub_labels = None if labels is None else labels[rows]
    out["triplet"] = triplet_loss(e, label_embs, cfg.margin, sub_labels, cfg.mask_label_collisions) \
        if len(rows) >= 2 else zero
    out["aux"] = aux_cosine_loss(e, label_embs)
    return out


def combined_loss(l_task: Tensor, l_cl: Tensor, alpha: float) -> Tensor:
    """L' = L_task + alpha * L_cl, used for both the recommendation and conversation sides."""
    if alpha == 0.0:
        return l_task
    return l_task + l_cl * alpha
