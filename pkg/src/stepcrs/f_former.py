"""F-Former: a learnable query bank that residual-cross-attends to a sample's
entity embeddings, then to its dialogue text vector, and averages the two."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, Tensor, concat, gather_rows, matmul, mean, softmax, swapaxes


@dataclass
class FusionOutput:
    q_entity: Tensor  # (B, K, D)
    q_text: Tensor  # (B, K, D)
    fused: Tensor  # (B, K, D)
    pooled: Tensor  # (B, D)


@dataclass
class AttentionWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor


def _batched(x: Tensor) -> Tensor:
    return x.reshape(1, *x.shape) if x.ndim == 2 else x


def cross_attention(queries: Tensor, keys: Tensor, weights: AttentionWeights, mask=None,
                    return_weights: bool = False):
    """softmax(Q Wq (H Wk)^T / sqrt(D)) H Wv without the residual.

    ``queries`` is (K, D) or (B, K, D); ``keys`` is (M, D) or (B, M, D);
    ``mask`` (True = attend) is (M,) or (B, M).
    """
    unbatched = queries.ndim == 2 and keys.ndim == 2
    q, h = _batched(queries), _batched(keys)
    d = q.shape[-1]
    if h.shape[-1] != d:
        raise DimensionError(f"query width {d} != key width {h.shape[-1]}")
    if h.shape[-2] < 1:
        raise DimensionError("cross_attention needs at least one key")
    logits = matmul(matmul(q, weights.w_q), swapaxes(matmul(h, weights.w_k), -1, -2)) * (1.0 / np.sqrt(d))
    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        m = m.reshape(1, 1, -1) if m.ndim == 1 else m[:, None, :]
        if not m.any(axis=-1).all():
            raise DimensionError("every key of some sample is masked")
    att = softmax(logits, axis=-1, mask=m)
    out = matmul(att, matmul(h, weights.w_v))
    if unbatched:
        out = out.reshape(out.shape[1:])
    return (out, att) if return_weights else out


def residual_stack(q: Tensor, keys: Tensor, layers: list[AttentionWeights], mask=None) -> Tensor:
    for w in layers:
        q = q + cross_attention(q, keys, w, mask)
    return q


def fuse(q_entity: Tensor, q_text: Tensor) -> FusionOutput:
    if q_entity.shape != q_text.shape:
        raise DimensionError(f"cannot fuse {q_entity.shape} with {q_text.shape}")
    fused = (q_entity + q_text) * 0.5
    return FusionOutput(q_entity, q_text, fused, mean(fused, axis=-2))


class FFormer:
    def __init__(self, dim: int, num_queries: int = 32, num_layers: int = 2, seed: int = 0,
                 dtype=np.float32, query_init_std: float = 0.02, proj_init_std: float | None = None,
                 text_keys: str = "cls"):
        if num_queries < 1:
            raise ValueError("num_queries must be >= 1")
        if text_keys not in ("cls", "tokens"):
            raise ValueError(f"text_keys must be 'cls' or 'tokens', got {text_keys!r}")
        rng = np.random.default_rng([seed, 202])
        std = proj_init_std if proj_init_std is not None else dim ** -0.5
        self.dim, self.num_queries, self.num_layers, self.text_keys = dim, num_queries, num_layers, text_keys

        def proj(name):
            return Tensor(rng.normal(0.0, std, size=(dim, dim)).astype(dtype), requires_grad=True, name=name)

        self.query_bank = Tensor(rng.normal(0.0, query_init_std, size=(num_queries, dim)).astype(dtype),
                                 requires_grad=True, name="fformer.query_bank")
        self.entity_layers = [AttentionWeights(*(proj(f"fformer.entity.{l}.{p}") for p in ("w_q", "w_k", "w_v")))
                              for l in range(num_layers)]
        self.text_layers = [AttentionWeights(*(proj(f"fformer.text.{l}.{p}") for p in ("w_q", "w_k", "w_v")))
                            for l in range(num_layers)]
        self.sentinel = Tensor(rng.normal(0.0, query_init_std, size=(1, dim)).astype(dtype),
                               requires_grad=True, name="fformer.sentinel")

    def parameters(self) -> dict[str, Tensor]:
        params = {"fformer.query_bank": self.query_bank, "fformer.sentinel": self.sentinel}
        for stage, layers in (("entity", self.entity_layers), ("text", self.text_layers)):
            for l, w in enumerate(layers):
                for p in ("w_q", "w_k", "w_v"):
                    params[f"fformer.{stage}.{l}.{p}"] = getattr(w, p)
        return params

    def entity_keys(self, table: Tensor, id_lists) -> tuple[Tensor, np.ndarray]:
        """Pad per-sample entity rows into (B, M, D); empty samples get the sentinel row.

        Ids are sorted and de-duplicated so the key order never depends on mention order.
        """
        n = table.shape[0]
        lists = [sorted(set(int(i) for i in ids)) for ids in id_lists]
        width = max(1, max((len(l) for l in lists), default=1))
        idx = np.zeros((len(lists), width), dtype=np.int64)
        mask = np.zeros((len(lists), width), dtype=bool)
        for b, ids in enumerate(lists):
            if ids:
                idx[b, :len(ids)] = ids
                mask[b, :len(ids)] = True
            else:
                idx[b, 0] = n
                mask[b, 0] = True
        full = concat([table, self.sentinel], axis=0)
        keys = gather_rows(full, idx.reshape(-1)).reshape(len(lists), width, table.shape[1])
        return keys, mask

    def entity_stage(self, entity_embs: Tensor, mask=None) -> Tensor:
        entity_embs = _batched(entity_embs)
        batch = entity_embs.shape[0]
        q0 = self.query_bank.reshape(1, self.num_queries, self.dim) * np.ones((batch, 1, 1), dtype=self.query_bank.dtype)
        return residual_stack(q0, entity_embs, self.entity_layers, mask)

    def text_stage(self, q_entity: Tensor, text: Tensor, mask=None) -> Tensor:
        """``text`` is t_cls as (B, D) or token rows as (B, L, D) with a (B, L) mask."""
        keys = text.reshape(text.shape[0], 1, text.shape[1]) if text.ndim == 2 else text
        return residual_stack(q_entity, keys, self.text_layers, mask if text.ndim == 3 else None)

    def __call__(self, entity_embs: Tensor, entity_mask, text: Tensor, text_mask=None) -> FusionOutput:
        q_e = self.entity_stage(entity_embs, entity_mask)
        q_t = self.text_stage(q_e, text, text_mask)
        return fuse(q_e, q_t)
