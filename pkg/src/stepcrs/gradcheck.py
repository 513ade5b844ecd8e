"""Finite-difference checks for every differentiable block of the model.

Each case builds a tiny float64 instance (batch <= 4, slots <= 4, width <= 8),
wraps it in a scalar function and compares tape gradients with central
differences via :func:`stepcrs.numerics.check_gradients`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .f_former import FFormer
from .knowledge_graph import KnowledgeGraph, RelationalEdges, RgcnLayer, rgcn_forward
from .numerics import GradCheckReport, Tensor, check_gradients, l2_normalize, tsum
from .objectives import (aux_cosine_loss, contrastive_ce_loss, margin_loss, mine_batch_hard, pairwise_similarity,
                         triplet_loss)
from .prompt_heads import (FrozenDecoder, PrefixHead, assemble_conv_prompt, assemble_rec_prompt, conv_loss, rank_items,
                           rec_loss)

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CaseResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape))


def _rgcn_case(rng):
    n, r, d = 6, 2, 5
    triples = {(int(rng.integers(n)), int(rng.integers(r)), int(rng.integers(n))) for _ in range(9)}
    triples |= {(i, 0, (i + 1) % n) for i in range(n)}
    g = KnowledgeGraph.from_named_triples([(f"e{h}", f"r{k}", f"e{t}") for h, k, t in sorted(triples)])
    edges = RelationalEdges.from_graph(g, add_inverse=True)
    # tanh keeps the check away from the ReLU kink; the linear part is shared
    layer = RgcnLayer(edges.num_relations, d, d, "tanh", rng=rng, dtype=np.float64)
    h = _t(rng, g.num_entities, d)
    probe = rng.normal(size=(g.num_entities, d))

    def f(h_in, *_):
        return tsum(rgcn_forward(layer, edges, h_in) * probe)
    return f, [h, layer.w_rel, layer.w_self]


def _fformer_case(rng):
    b, k, d, m = 3, 4, 8, 3
    ff = FFormer(d, num_queries=k, num_layers=2, seed=int(rng.integers(1 << 30)), dtype=np.float64,
                 query_init_std=0.5)
    keys = _t(rng, b, m, d)
    mask = np.ones((b, m), dtype=bool)
    mask[0, 2] = False
    text = _t(rng, b, d)
    params = list(ff.parameters().values())
    probe_f, probe_p = rng.normal(size=(b, k, d)), rng.normal(size=(b, d))

    # the module reads its own parameter tensors, which are the checked inputs
    def f(keys_, text_, *_):
        out = ff(keys_, mask, text_)
        return tsum(out.fused * probe_f) + tsum(out.pooled * probe_p)
    return f, [keys, text] + params


def _contrastive_case(rng):
    b, k, d = 4, 3, 6
    labels = np.array([0, 1, 1, 2])

    def ce(q, t):
        tables = pairwise_similarity(l2_normalize(q), l2_normalize(t), 0.5)
        return contrastive_ce_loss(tables.pooled_q2t, tables.pooled_t2q, 0.1)

    def margin(q, t):
        tables = pairwise_similarity(l2_normalize(q), l2_normalize(t), 1.0)
        return margin_loss(*mine_batch_hard(tables, labels), 2.0)
    return [("contrastive_ce", ce, [_t(rng, b, k, d), _t(rng, b, d)]),
            ("margin", margin, [_t(rng, b, k, d), _t(rng, b, d)])]


def _alignment_cases(rng):
    b, d = 4, 6
    labels = np.array([3, 1, 3, 0])
    return [("triplet", lambda e, r: triplet_loss(e, r, 2.0, labels), [_t(rng, b, d), _t(rng, b, d)]),
            ("aux_cosine", aux_cosine_loss, [_t(rng, b, d), _t(rng, b, d)])]


def _prefix_case(rng, name):
    head = PrefixHead(name, 3, 6, seed=int(rng.integers(1 << 30)), dtype=np.float64, out_init_std=0.5)
    params = list(head.parameters().values())
    probe = rng.normal(size=(3, 6))

    def f(*_):
        return tsum(head.refine() * probe)
    return f, params


def _conv_case(rng):
    v, d = 12, 8
    dec = FrozenDecoder(v, d, num_layers=2, seed=int(rng.integers(1 << 30)), max_len=32, dtype=np.float64,
                        emb_std=0.5, pos_scale=0.5, norm="post")
    ctx = [[6, 7, 8], [9, 10]]
    resp = [[11, 6, 2], [7, 2]]

    def f(prefix, pooled):
        return conv_loss(dec, assemble_conv_prompt(prefix, pooled), ctx, resp)
    return f, [_t(rng, 2, d), _t(rng, 2, d)]


def _rec_case(rng):
    v, d, m = 12, 8, 5
    dec = FrozenDecoder(v, d, num_layers=2, seed=int(rng.integers(1 << 30)), max_len=32, dtype=np.float64,
                        emb_std=0.5, pos_scale=0.5, norm="post")
    templates = [[6, 4, 7], [8, 4]]
    labels = np.zeros((2, m))
    labels[0, 1] = labels[1, 3] = 1.0

    def f(prefix, pooled, ent_mean, items):
        prompt = assemble_rec_prompt(prefix, pooled, ent_mean, 0.1)
        return rec_loss(rank_items(dec, prompt, templates, items), labels)
    return f, [_t(rng, 2, d), _t(rng, 2, d), _t(rng, 2, d), _t(rng, m, d, scale=0.3)]


def cases(seed: int = 0) -> list[tuple[str, Callable, list[Tensor]]]:
    rng = np.random.default_rng(seed)
    out = [("rgcn", *_rgcn_case(rng)), ("fformer", *_fformer_case(rng))]
    out += _contrastive_case(rng)
    out += _alignment_cases(rng)
    out += [("prefix_conv", *_prefix_case(rng, "conv")), ("prefix_rec", *_prefix_case(rng, "rec")),
            ("conv_loss", *_conv_case(rng)), ("rec_loss", *_rec_case(rng))]
    return out


def run_suite(seed: int = 0, tolerance: float = TOLERANCE, step: float = STEP) -> list[CaseResult]:
    return [CaseResult(name, check_gradients(f, inputs, step=step, tolerance=tolerance))
            for name, f, inputs in cases(seed)]
