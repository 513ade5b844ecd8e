"""Prefix-prompt heads over a frozen causal decoder.

The conversation head feeds ``[prefix ; fused row ; context ; BOS ; response]``
and scores next tokens; the recommendation head feeds
``[prefix ; fused row + lambda * entity mean ; template]`` and ranks items by
the last hidden state against the item embedding table.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dialogue_corpus import (BOS_ID, CLS_ID, EOS_ID, ITEM, ITEM_ID, PAD_ID, UNK_ID, Vocabulary,
                              parameter_hash, sinusoidal_positions)
from .numerics import (DimensionError, Tensor, clip, concat, layer_norm, log, log_softmax, matmul, no_grad, relu,
                       softmax, swapaxes, tsum)

log_ = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class FrozenDecoder:
    """Causal self-attention blocks (pre- or post-norm) with a separate LM head.

    Parameters are plain arrays, never tape leaves, so gradients reach the
    input embeddings but never the decoder itself.
    """

    def __init__(self, vocab_size: int, dim: int, num_layers: int = 2, seed: int = 0, max_len: int = 512,
                 dtype=np.float32, emb_std: float = 1.0, pos_scale: float = 1.0, attn_std: float | None = None,
                 norm: str = "pre"):
        if norm not in ("pre", "post"):
            raise ValueError(f"norm must be 'pre' or 'post', got {norm!r}")
        self.norm = norm
        rng = np.random.default_rng([seed, 303])
        s = dim ** -0.5
        a = attn_std if attn_std is not None else s
        self.dim, self.num_layers, self.vocab_size = dim, num_layers, vocab_size
        self.params: dict[str, np.ndarray] = {"tok_emb": rng.normal(0.0, emb_std, size=(vocab_size, dim)),
                                              "lm_head": rng.normal(0.0, s, size=(dim, vocab_size))}
        for l in range(num_layers):
            for p in ("w_q", "w_k"):
                self.params[f"block{l}.{p}"] = rng.normal(0.0, a, size=(dim, dim))
            for p in ("w_v", "w_o"):
                self.params[f"block{l}.{p}"] = rng.normal(0.0, s, size=(dim, dim))
            self.params[f"block{l}.ffn_in"] = rng.normal(0.0, s, size=(dim, 2 * dim))
            self.params[f"block{l}.ffn_out"] = rng.normal(0.0, (2 * dim) ** -0.5, size=(2 * dim, dim))
        for k, v in self.params.items():
            v = v.astype(dtype)
            v.setflags(write=False)
            self.params[k] = v
        self.max_len = max_len
        self._pos = (pos_scale * sinusoidal_positions(max_len, dim, np.float64)).astype(dtype)
        self._consts = {k: Tensor(v) for k, v in self.params.items()}

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def parameter_hash(self) -> str:
        return parameter_hash(self.params[k] for k in sorted(self.params))

    def embed(self, ids) -> np.ndarray:
        return self.params["tok_emb"][np.asarray(ids, dtype=np.int64)]

    def hidden_states(self, x: Tensor) -> Tensor:
        """(B, L, D) input embeddings -> final normalised hidden states (B, L, D)."""
        b, length, d = x.shape
        if d != self.dim:
            raise DimensionError(f"decoder width {self.dim} != input width {d}")
        if length > self.max_len:
            raise DimensionError(f"sequence length {length} exceeds decoder max_len {self.max_len}")
        c = self._consts
        h = x + self._pos[:length]
        causal = np.tril(np.ones((length, length), dtype=bool))[None]
        scale = 1.0 / np.sqrt(d)
        pre = self.norm == "pre"
        for l in range(self.num_layers):
            z = layer_norm(h) if pre else h
            q, k, v = (matmul(z, c[f"block{l}.{p}"]) for p in ("w_q", "w_k", "w_v"))
            att = softmax(matmul(q, swapaxes(k, -1, -2)) * scale, axis=-1, mask=causal)
            h = h + matmul(matmul(att, v), c[f"block{l}.w_o"])
            if pre:
                h = h + matmul(relu(matmul(layer_norm(h), c[f"block{l}.ffn_in"])), c[f"block{l}.ffn_out"])
            else:
                h = layer_norm(h)
                h = layer_norm(h + matmul(relu(matmul(h, c[f"block{l}.ffn_in"])), c[f"block{l}.ffn_out"]))
        return layer_norm(h) if pre else h

    def logits(self, hidden: Tensor) -> Tensor:
        return matmul(hidden, self._consts["lm_head"])


class PrefixHead:
    """Learnable prefix rows refined by ``sigma(E W + b) + E``, sigma a two-layer ReLU MLP."""

    def __init__(self, name: str, length: int, dim: int, seed: int = 0, dtype=np.float32,
                 prefix_init_std: float = 1.0, out_init_std: float = 0.02):
        rng = np.random.default_rng([seed, 404, length, sum(map(ord, name))])
        s = dim ** -0.5

        def param(suffix, arr):
            return Tensor(arr.astype(dtype), requires_grad=True, name=f"{name}.{suffix}")

        self.name, self.length, self.dim = name, length, dim
        self.prefix = param("prefix", rng.normal(0.0, prefix_init_std, size=(length, dim)))
        self.w = param("w", rng.normal(0.0, s, size=(dim, dim)))
        self.b = param("b", np.zeros(dim))
        self.mlp_w1 = param("mlp_w1", rng.normal(0.0, s, size=(dim, dim)))
        self.mlp_b1 = param("mlp_b1", np.zeros(dim))
        self.mlp_w2 = param("mlp_w2", rng.normal(0.0, out_init_std, size=(dim, dim)))
        self.mlp_b2 = param("mlp_b2", np.zeros(dim))

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.prefix, self.w, self.b, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2)}

    def refine(self) -> Tensor:
        z = matmul(self.prefix, self.w) + self.b
        sigma = matmul(relu(matmul(z, self.mlp_w1) + self.mlp_b1), self.mlp_w2) + self.mlp_b2
        return sigma + self.prefix


def refine_prefix(head: PrefixHead) -> Tensor:
    return head.refine()


def _broadcast_rows(rows: Tensor, batch: int) -> Tensor:
    return rows.reshape(1, *rows.shape) * np.ones((batch, 1, 1), dtype=rows.dtype)


def _pad_token_block(decoder: FrozenDecoder, id_lists: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(x) for x in id_lists), default=0)
    ids = np.full((len(id_lists), width), PAD_ID, dtype=np.int64)
    for b, x in enumerate(id_lists):
        ids[b, :len(x)] = x
    return decoder.embed(ids), np.array([len(x) for x in id_lists])


def assemble_conv_prompt(refined_prefix: Tensor, pooled: Tensor) -> Tensor:
    """(B, P_c + 1, D): the refined prefix rows followed by each sample's fused row."""
    b = pooled.shape[0]
    return concat([_broadcast_rows(refined_prefix, b), pooled.reshape(b, 1, pooled.shape[1])], axis=1)


def secondary_fusion(pooled: Tensor, entity_mean: Tensor, lam: float) -> Tensor:
    if lam == 0.0:
        return pooled
    return pooled + entity_mean * lam


def assemble_rec_prompt(refined_prefix: Tensor, pooled: Tensor, entity_mean: Tensor, lam: float) -> Tensor:
    """(B, P_r + 1, D): prefix rows then H' = pooled + lambda * entity_mean.

    The template tokens are appended by the decoder-side helpers.
    """
    b = pooled.shape[0]
    fused = secondary_fusion(pooled, entity_mean, lam)
    return concat([_broadcast_rows(refined_prefix, b), fused.reshape(b, 1, fused.shape[1])], axis=1)


@dataclass
class ConvBatch:
    inputs: Tensor  # (B, L, D)
    target_pos: np.ndarray  # flat (b, t) positions whose logits predict a response token
    target_ids: np.ndarray


def build_conv_inputs(decoder: FrozenDecoder, prompt: Tensor, context_ids: Sequence[Sequence[int]],
                      response_ids: Sequence[Sequence[int]], max_response_len: int = 32) -> ConvBatch:
    b, p_len = prompt.shape[0], prompt.shape[1]
    seqs, pos_b, pos_t, tgt = [], [], [], []
    for i, (ctx, resp) in enumerate(zip(context_ids, response_ids)):
        resp = list(resp)
        if not resp:
            raise ValueError("gold response must be non-empty")
        if len(resp) > max_response_len:
            log_.warning("response of %d tokens truncated to %d", len(resp), max_response_len)
            resp = resp[:max_response_len]
        seq = list(ctx) + [BOS_ID] + resp[:-1]
        start = p_len + len(ctx)  # position of BOS
        seqs.append(seq)
        pos_b.extend([i] * len(resp))
        pos_t.extend(range(start, start + len(resp)))
        tgt.extend(resp)
    tokens, _ = _pad_token_block(decoder, seqs)
    inputs = concat([prompt, Tensor(tokens.astype(prompt.dtype))], axis=1)
    return ConvBatch(inputs, (np.array(pos_b), np.array(pos_t)), np.array(tgt, dtype=np.int64))


def conv_loss(decoder: FrozenDecoder, prompt: Tensor, context_ids, response_ids, max_response_len: int = 32) -> Tensor:
    """Mean next-token cross-entropy over response positions (teacher forcing)."""
    batch = build_conv_inputs(decoder, prompt, context_ids, response_ids, max_response_len)
    hidden = decoder.hidden_states(batch.inputs)
    picked = hidden[batch.target_pos]  # (N, D)
    lp = log_softmax(decoder.logits(picked), axis=-1)
    n = len(batch.target_ids)
    return -tsum(lp[(np.arange(n), batch.target_ids)]) * (1.0 / n)


_BLOCKED_TOKENS = (PAD_ID, BOS_ID, CLS_ID, UNK_ID)


def greedy_decode(decoder: FrozenDecoder, prompt: Tensor, context_ids: Sequence[Sequence[int]],
                  max_len: int = 20) -> list[list[int]]:
    """Batched greedy decoding; each sample stops at EOS or after ``max_len`` tokens."""
    with no_grad():
        b, p_len, d = prompt.shape
        seqs = [list(ctx) + [BOS_ID] for ctx in context_ids]
        out: list[list[int]] = [[] for _ in range(b)]
        done = np.zeros(b, dtype=bool)
        for _ in range(max_len):
            tokens, lens = _pad_token_block(decoder, seqs)
            hidden = decoder.hidden_states(concat([prompt, Tensor(tokens.astype(prompt.dtype))], axis=1))
            last = hidden.data[np.arange(b), p_len + lens - 1]
            logits = last @ decoder.params["lm_head"]
            logits[:, list(_BLOCKED_TOKENS)] = -np.inf
            nxt = np.argmax(logits, axis=-1)
            for i in range(b):
                if done[i]:
                    continue
                if nxt[i] == EOS_ID:
                    done[i] = True
                    continue
                out[i].append(int(nxt[i]))
                seqs[i].append(int(nxt[i]))
            if done.all():
                break
    return out


def substitute_items(vocab: Vocabulary, ids: Sequence[int], ranked_names: Sequence[str]) -> str:
    """Detokenise, replacing the k-th emitted [ITEM] with the k-th ranked name."""
    words, k = [], 0
    for i in ids:
        if i == ITEM_ID:
            words.append(ranked_names[k] if k < len(ranked_names) else ITEM)
            k += 1
        elif i not in (PAD_ID, BOS_ID, EOS_ID, CLS_ID):
            words.append(vocab.tokens[i])
    return " ".join(words)


def generate_response(decoder: FrozenDecoder, prompt: Tensor, context_ids, vocab: Vocabulary,
                      ranked_names: Sequence[Sequence[str]], max_len: int = 20) -> list[str]:
    ids = greedy_decode(decoder, prompt, context_ids, max_len)
    return [substitute_items(vocab, x, names) for x, names in zip(ids, ranked_names)]


def rec_hidden(decoder: FrozenDecoder, prompt: Tensor, template_ids: Sequence[Sequence[int]]) -> Tensor:
    """Final hidden state at the last template position of each sample, (B, D)."""
    if any(len(t) == 0 for t in template_ids):
        raise ValueError("response template must be non-empty")
    tokens, lens = _pad_token_block(decoder, template_ids)
    seq = concat([prompt, Tensor(tokens.astype(prompt.dtype))], axis=1)
    hidden = decoder.hidden_states(seq)
    return hidden[(np.arange(prompt.shape[0]), prompt.shape[1] + lens - 1)]


def rank_items(decoder: FrozenDecoder, prompt: Tensor, template_ids, item_table: Tensor) -> Tensor:
    """Softmax over the item table of <last hidden state, item embedding>, (B, M)."""
    if item_table.shape[0] == 0:
        raise DimensionError("empty item table")
    h = rec_hidden(decoder, prompt, template_ids)
    return softmax(matmul(h, item_table.T), axis=-1)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best scores per row; ties broken by lower index."""
    order = np.argsort(-np.asarray(scores), axis=-1, kind="stable")
    return order[..., :k]


def rec_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Binary cross-entropy over softmax outputs, summed over items, averaged over samples."""
    y = np.asarray(labels, dtype=probs.dtype)
    p = clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    total = tsum(log(p) * y + log(1.0 - p) * (1.0 - y))
    return -total * (1.0 / probs.shape[0])
