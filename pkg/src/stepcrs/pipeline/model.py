"""The assembled model: entity table + RGCN, F-Former, two prefix heads, and
the frozen encoder/decoder stand-ins."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dialogue_corpus import (EOS_ID, CorpusError, DialogueSample, FrozenTextEncoder, Vocabulary,
                               context_token_ids, mask_items, tokenize)
from ..f_former import FFormer, FusionOutput
from ..knowledge_graph import KnowledgeGraph, RelationalEdges, RgcnLayer, rgcn_forward
from ..numerics import Tensor, gather_rows, no_grad, tsum
from ..objectives import (AblationFlags, ContrastiveConfig, CurriculumSchedule, alignment_losses, combined_loss,
                          curriculum_loss)
from ..prompt_heads import (FrozenDecoder, PrefixHead, assemble_conv_prompt, assemble_rec_prompt, conv_loss,
                            greedy_decode, rank_items, rec_loss, substitute_items, top_k)
from .config import TrainConfig


@dataclass
class RecExample:
    """One (sample, gold item) pair; multi-item turns yield one example per item."""
    sample: DialogueSample
    item: int


class STEPModel:
    def __init__(self, cfg: TrainConfig, kg: KnowledgeGraph, vocab: Vocabulary):
        m = cfg.model
        self.cfg, self.kg, self.vocab = cfg, kg, vocab
        self.dtype = np.dtype(m.dtype)
        seed = cfg.seed
        self.edges = RelationalEdges.from_graph(kg, m.add_inverse_relations)
        rng = np.random.default_rng([seed, 11])
        self.entity_table = Tensor(rng.normal(0.0, m.entity_init_std, size=(kg.num_entities, m.dim)).astype(self.dtype),
                                   requires_grad=True, name="entity_table")
        self.rgcn = RgcnLayer(self.edges.num_relations, m.dim, m.dim, m.rgcn_activation,
                              rng=np.random.default_rng([seed, 12]), dtype=self.dtype, init=m.rgcn_init)
        self.fformer = FFormer(m.dim, m.num_queries, m.fformer_layers, seed=seed, dtype=self.dtype,
                               query_init_std=m.query_init_std, text_keys=m.text_keys)
        self.conv_head = PrefixHead("conv_head", m.prefix_conv, m.dim, seed=seed, dtype=self.dtype,
                                    prefix_init_std=m.prefix_init_std)
        self.rec_head = PrefixHead("rec_head", m.prefix_rec, m.dim, seed=seed, dtype=self.dtype,
                                   prefix_init_std=m.prefix_init_std)
        # frozen stand-ins depend only on the seed, never on training
        self.encoder = FrozenTextEncoder(len(vocab), m.dim, seed=seed, max_len=m.max_context_len, dtype=self.dtype,
                                         emb_std=m.standin_emb_std, pos_scale=m.standin_pos_scale,
                                         attn_std=m.standin_attn_std, out_scale=m.encoder_out_scale)
        self.decoder = FrozenDecoder(len(vocab), m.dim, seed=seed, dtype=self.dtype,
                                     max_len=m.prefix_conv + 1 + m.decoder_context_len + 1 + m.max_response_len + 8,
                                     emb_std=m.standin_emb_std, pos_scale=m.standin_pos_scale,
                                     attn_std=m.standin_attn_std, norm=m.decoder_norm)
        self.item_ids = np.asarray(kg.item_ids, dtype=np.int64)
        self.item_column = {int(i): c for c, i in enumerate(self.item_ids)}
        self._text_cache: dict[str, tuple[Tensor, Tensor]] = {}
        self.contrastive = ContrastiveConfig(cfg.objective.temperature, cfg.objective.margin,
                                             cfg.objective.label_smoothing, cfg.objective.mask_label_collisions)
        self.schedule = CurriculumSchedule(cfg.curriculum.e1, cfg.curriculum.e2, cfg.curriculum.en)
        self.flags = AblationFlags(**vars(cfg.ablation))

    # -- parameters ---------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        params = {"entity_table": self.entity_table}
        params.update(self.rgcn.parameters())
        params.update(self.fformer.parameters())
        params.update(self.conv_head.parameters())
        params.update(self.rec_head.parameters())
        return params

    def frozen_hashes(self) -> dict[str, str]:
        return {"text_encoder": self.encoder.parameter_hash(), "decoder": self.decoder.parameter_hash()}

    # -- shared encoders ----------------------------------------------------
    def entity_embeddings(self) -> Tensor:
        return rgcn_forward(self.rgcn, self.edges, self.entity_table)

    def text_features(self, samples: list[DialogueSample]) -> tuple[Tensor, Tensor | None, np.ndarray | None]:
        """(t_cls (B, D), token rows (B, L, D) or None, token mask or None); cached per sample."""
        cls_rows, tok_rows = [], []
        for s in samples:
            if s.id not in self._text_cache:
                ids = context_token_ids(self.vocab, s.context, self.cfg.model.max_context_len)
                if not ids:
                    raise CorpusError(f"sample {s.id} has an empty context")
                self._text_cache[s.id] = self.encoder.encode(ids)
            tokens, cls = self._text_cache[s.id]
            cls_rows.append(cls.data)
            tok_rows.append(tokens.data)
        t_cls = Tensor(np.stack(cls_rows))
        if self.cfg.model.text_keys == "cls":
            return t_cls, None, None
        width = max(len(t) for t in tok_rows)
        block = np.zeros((len(samples), width, self.cfg.model.dim), dtype=self.dtype)
        mask = np.zeros((len(samples), width), dtype=bool)
        for b, t in enumerate(tok_rows):
            block[b, :len(t)] = t
            mask[b, :len(t)] = True
        return t_cls, Tensor(block), mask

    def fuse(self, samples: list[DialogueSample], h: Tensor):
        keys, mask = self.fformer.entity_keys(h, [s.context_entities for s in samples])
        t_cls, tokens, tmask = self.text_features(samples)
        fusion = self.fformer(keys, mask, tokens if tokens is not None else t_cls, tmask)
        return fusion, keys, mask, t_cls

    @staticmethod
    def entity_mean(keys: Tensor, mask: np.ndarray) -> Tensor:
        w = mask.astype(keys.dtype) / mask.sum(axis=1, keepdims=True).astype(keys.dtype)
        return tsum(keys * w[:, :, None], axis=1)

    def item_table(self, h: Tensor) -> Tensor:
        return gather_rows(h, self.item_ids)

    # -- token views ----------------------------------------------------------
    def masked_response_ids(self, s: DialogueSample) -> list[int]:
        names = [self.kg.entity_names[i] for i in s.response.items]
        return tokenize(self.vocab, mask_items(s.response.text, names))

    def decoder_context_ids(self, s: DialogueSample) -> list[int]:
        return context_token_ids(self.vocab, s.context, self.cfg.model.decoder_context_len)

    # -- losses ---------------------------------------------------------------
    def _alignment(self, fusion: FusionOutput, t_cls: Tensor, h: Tensor, gold: list[int | None], epoch: int):
        labels = np.array([g if g is not None else -1 - b for b, g in enumerate(gold)], dtype=np.int64)
        rows = [b for b, g in enumerate(gold) if g is not None]
        label_embs = gather_rows(h, [gold[b] for b in rows]) if rows else None
        parts = alignment_losses(fusion.fused, fusion.pooled, t_cls, label_embs, labels, self.contrastive,
                                 label_rows=rows)
        return parts, curriculum_loss(parts, self.schedule, epoch, self.flags)

    def _second_fusion_rows(self, keys, mask, h, examples_gold: list[int | None]) -> Tensor:
        if self.cfg.model.eq23_h == "gold-item" and all(g is not None for g in examples_gold):
            return gather_rows(h, examples_gold)
        return self.entity_mean(keys, mask)

    def rec_prompt(self, fusion: FusionOutput, keys: Tensor, mask: np.ndarray, h: Tensor,
                   gold: list[int | None] | None = None) -> Tensor:
        """Prefix rows then H' = pooled + lambda * second-fusion rows; ``gold`` only matters in gold-item mode."""
        second = self._second_fusion_rows(keys, mask, h, gold or [None] * fusion.pooled.shape[0])
        return assemble_rec_prompt(self.rec_head.refine(), fusion.pooled, second, self.cfg.model.lam)

    def rec_losses(self, batch: list[RecExample], epoch: int) -> dict[str, Tensor]:
        samples = [ex.sample for ex in batch]
        h = self.entity_embeddings()
        fusion, keys, mask, t_cls = self.fuse(samples, h)
        parts, l_cl = self._alignment(fusion, t_cls, h, [ex.item for ex in batch], epoch)
        prompt = self.rec_prompt(fusion, keys, mask, h, [ex.item for ex in batch])
        probs = rank_items(self.decoder, prompt, [self.masked_response_ids(s) for s in samples], self.item_table(h))
        labels = np.zeros(probs.shape, dtype=self.dtype)
        labels[np.arange(len(batch)), [self.item_column[ex.item] for ex in batch]] = 1.0
        l_rec = rec_loss(probs, labels)
        total = combined_loss(l_rec, l_cl, self.cfg.optim.alpha)
        return dict(parts, cl=l_cl, rec=l_rec, total=total)

    def conv_losses(self, batch: list[DialogueSample], epoch: int) -> dict[str, Tensor]:
        h = self.entity_embeddings()
        fusion, keys, mask, t_cls = self.fuse(batch, h)
        gold = [s.gold_items[0] if s.gold_items else None for s in batch]
        parts, l_cl = self._alignment(fusion, t_cls, h, gold, epoch)
        prompt = assemble_conv_prompt(self.conv_head.refine(), fusion.pooled)
        l_conv = conv_loss(self.decoder, prompt, [self.decoder_context_ids(s) for s in batch],
                           [self.masked_response_ids(s) + [EOS_ID] for s in batch], self.cfg.model.max_response_len + 1)
        total = combined_loss(l_conv, l_cl, self.cfg.optim.alpha)
        return dict(parts, cl=l_cl, conv=l_conv, total=total)

    # -- inference ------------------------------------------------------------
    def generate_ids(self, samples: list[DialogueSample], h: Tensor | None = None, max_len: int | None = None):
        with no_grad():
            h = self.entity_embeddings() if h is None else h
            fusion, _, _, _ = self.fuse(samples, h)
            prompt = assemble_conv_prompt(self.conv_head.refine(), fusion.pooled)
            return greedy_decode(self.decoder, prompt, [self.decoder_context_ids(s) for s in samples],
                                 max_len or self.cfg.eval.gen_max_len)

    def score_items(self, samples: list[DialogueSample], templates: list[list[int]], h: Tensor | None = None) -> np.ndarray:
        """Item probabilities (B, M) with M ordered as ``self.item_ids``."""
        with no_grad():
            h = self.entity_embeddings() if h is None else h
            fusion, keys, mask, _ = self.fuse(samples, h)
            # inference never sees the gold item, so gold-item mode falls back to the mentioned-entity mean
            prompt = self.rec_prompt(fusion, keys, mask, h)
            templates = [t if t else [EOS_ID] for t in templates]
            return rank_items(self.decoder, prompt, templates, self.item_table(h)).data

    def recommend_and_respond(self, samples: list[DialogueSample], template: str = "generated", k: int = 50):
        """Ranked item ids, generated texts and raw generated ids for a batch."""
        with no_grad():
            h = self.entity_embeddings()
            gen = self.generate_ids(samples, h)
            templates = gen if template == "generated" else [self.masked_response_ids(s) for s in samples]
            scores = self.score_items(samples, templates, h)
        order = top_k(scores, min(k, scores.shape[1]))
        ranked = [[int(self.item_ids[c]) for c in row] for row in order]
        texts = [substitute_items(self.vocab, g, [self.kg.entity_names[i] for i in r])
                 for g, r in zip(gen, ranked)]
        return ranked, texts, gen, scores
