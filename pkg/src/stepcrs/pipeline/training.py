"""Two-phase training, evaluation and checkpoint I/O.

Phase A ("pretrain") optimises L_rec + alpha * L_cl over recommendation
examples with the curriculum epoch driving the stage weights.  Phase B
("finetune") optimises L_conv + alpha * L_cl with the stage weights held at
their final values.  ``optim.joint`` replaces both phases with one loop over
the summed objectives.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dialogue_corpus import (Dialogue, DialogueSample, Vocabulary, build_vocabulary, dialogue_samples,
                               read_jsonl, validate_dialogue)
from ..knowledge_graph import KnowledgeGraph, load_kg
from ..numerics import NumericalError
from .checkpoint import CheckpointError, assign_parameters, load_arrays, save_arrays
from .config import TrainConfig
from .metrics import distinct_n, recall_at_k
from .model import RecExample, STEPModel
from .optim import AdamW, clip_grad_norm

log = logging.getLogger(__name__)


class TrainingDiverged(NumericalError):
    pass


@dataclass
class Dataset:
    kg: KnowledgeGraph
    train: list[Dialogue]
    valid: list[Dialogue]
    test: list[Dialogue]


def load_dataset(cfg: TrainConfig, data_dir=None) -> Dataset:
    d = Path(data_dir or cfg.data.dir or ".")
    kg = load_kg(d / cfg.data.kg, d / cfg.data.items if (d / cfg.data.items).exists() else None)
    splits = [read_jsonl(d / getattr(cfg.data, s), kg) if (d / getattr(cfg.data, s)).exists() else []
              for s in ("train", "valid", "test")]
    return Dataset(kg, *splits)


def rec_examples(dialogues: list[Dialogue]) -> list[RecExample]:
    return [RecExample(s, i) for d in dialogues for s in dialogue_samples(d) for i in s.gold_items]


def conv_samples(dialogues: list[Dialogue]) -> list[DialogueSample]:
    return [s for d in dialogues for s in dialogue_samples(d)]


def _batches(items: list, size: int, rng: np.random.Generator) -> list[list]:
    order = rng.permutation(len(items))
    return [[items[i] for i in order[k:k + size]] for k in range(0, len(items), size)]


@dataclass
class MetricsReport:
    seed: int
    config: dict
    recall: dict = field(default_factory=dict)
    distinct: dict = field(default_factory=dict)
    curves: list = field(default_factory=list)
    frozen_hashes: dict = field(default_factory=dict)
    n_eval_turns: int = 0
    n_generated: int = 0
    wall_clock_seconds: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {"seed": self.seed, "config": self.config, "recall": self.recall, "distinct": self.distinct,
               "curves": self.curves, "frozen_hashes": self.frozen_hashes, "n_eval_turns": self.n_eval_turns,
               "n_generated": self.n_generated}
        if include_timing:
            out["wall_clock_seconds"] = self.wall_clock_seconds
        return out

    def write(self, path) -> None:
        """Write the deterministic report; wall-clock goes to a sibling ``.timing.json``."""
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(include_timing=False), sort_keys=True, indent=1) + "\n",
                        encoding="utf-8")
        path.with_suffix(".timing.json").write_text(
            json.dumps({"wall_clock_seconds": self.wall_clock_seconds}) + "\n", encoding="utf-8")

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "component", "value"])
        for row in self.curves:
            w.writerow([row["epoch"], f"{row['phase']}/{row['component']}", repr(row["value"])])
        return buf.getvalue()


class Trainer:
    def __init__(self, cfg: TrainConfig, kg: KnowledgeGraph, train: list[Dialogue],
                 vocab: Vocabulary | None = None):
        cfg.validate()
        for d in train:
            validate_dialogue(d, kg)
        self.cfg, self.kg = cfg, kg
        self.vocab = vocab or build_vocabulary(train, kg)
        self.model = STEPModel(cfg, kg, self.vocab)
        o = cfg.optim
        self.opt = AdamW(self.model.parameters(), o.lr_pretrain, (o.beta1, o.beta2), o.eps, o.weight_decay)
        self.rec_data = rec_examples(train)
        self.conv_data = conv_samples(train)
        self.next_epoch = 0
        self.curves: list[dict] = []

    # -- schedule -------------------------------------------------------------
    def plan(self) -> list[tuple[str, int]]:
        en = self.cfg.curriculum.en
        if self.cfg.optim.joint:
            return [("joint", e) for e in range(en)]
        phases = [("pretrain", e) for e in range(en)]
        if self.cfg.optim.finetune:
            phases += [("finetune", e) for e in range(en)]
        return phases

    def run(self, max_epochs: int | None = None) -> None:
        plan = self.plan()
        stop = len(plan) if max_epochs is None else min(len(plan), self.next_epoch + max_epochs)
        while self.next_epoch < stop:
            phase, e = plan[self.next_epoch]
            self._run_epoch(phase, e, self.next_epoch)
            self.next_epoch += 1

    def _step(self, loss, phase: str, epoch: int, step: int, lr: float, freeze: tuple[str, ...] = ()) -> None:
        if not np.isfinite(loss.data).all():
            raise TrainingDiverged(f"non-finite loss in {phase} epoch {epoch} step {step}")
        self.opt.zero_grad()
        loss.backward()
        params = self.opt.params
        for name in freeze:
            params[name].grad = None
        clip_grad_norm(params, self.cfg.optim.grad_clip)
        try:
            self.opt.step(lr)
        except NumericalError as exc:
            raise TrainingDiverged(f"{exc} ({phase} epoch {epoch} step {step})") from exc

    def _run_epoch(self, phase: str, epoch: int, global_epoch: int) -> None:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 99, global_epoch])
        sums: dict[str, float] = {}
        counts: dict[str, int] = {}

        def record(parts):
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v.data)
                counts[k] = counts.get(k, 0) + 1

        if phase == "pretrain":
            for step, batch in enumerate(_batches(self.rec_data, cfg.optim.batch_size_rec, rng)):
                parts = self.model.rec_losses(batch, epoch)
                self._step(parts["total"], phase, epoch, step, cfg.optim.lr_pretrain)
                record(parts)
        elif phase == "finetune":
            if cfg.optim.finetune_shared:
                freeze = ("fformer.query_bank",) if cfg.optim.freeze_query_bank_finetune else ()
            else:
                freeze = tuple(n for n in self.opt.params if not n.startswith("conv_head."))
            held = max(cfg.curriculum.en, 0)
            for step, batch in enumerate(_batches(self.conv_data, cfg.optim.batch_size_conv, rng)):
                parts = self.model.conv_losses(batch, held)
                self._step(parts["total"], phase, epoch, step, cfg.optim.lr_finetune, freeze)
                record(parts)
        else:
            rec_b = _batches(self.rec_data, cfg.optim.batch_size_rec, rng)
            conv_b = _batches(self.conv_data, cfg.optim.batch_size_conv, rng)
            for step, batch in enumerate(rec_b):
                rp = self.model.rec_losses(batch, epoch)
                cp = self.model.conv_losses(conv_b[step % len(conv_b)], epoch)
                total = rp["total"] + cp["conv"]
                self._step(total, phase, epoch, step, cfg.optim.lr_pretrain)
                record({**rp, "conv": cp["conv"], "total": total})
        for k in sums:
            self.curves.append({"epoch": global_epoch, "phase": phase, "component": k,
                                "value": sums[k] / counts[k]})

    # -- checkpoints ------------------------------------------------------------
    def save(self, prefix) -> None:
        arrays = {name: p.data for name, p in self.model.parameters().items()}
        for name in self.model.parameters():
            arrays[f"optim.m/{name}"] = self.opt.m[name]
            arrays[f"optim.v/{name}"] = self.opt.v[name]
        meta = {"config": self.cfg.to_dict(), "seed": self.cfg.seed, "epoch": self.next_epoch,
                "optimizer_steps": dict(self.opt.steps), "curves": self.curves,
                "vocabulary": self.vocab.to_json(), "frozen_hashes": self.model.frozen_hashes(),
                "param_names": list(self.model.parameters())}
        save_arrays(prefix, arrays, meta)

    @classmethod
    def load(cls, prefix, kg: KnowledgeGraph, train: list[Dialogue]) -> "Trainer":
        arrays, meta = load_arrays(prefix)
        cfg = TrainConfig.from_dict(meta["config"])
        t = cls(cfg, kg, train, Vocabulary.from_json(meta["vocabulary"]))
        if t.model.frozen_hashes() != meta["frozen_hashes"]:
            raise CheckpointError("frozen encoder/decoder hashes differ from the checkpoint")
        params = t.model.parameters()
        assign_parameters(params, arrays)
        for name in params:
            t.opt.m[name] = arrays[f"optim.m/{name}"].astype(params[name].dtype)
            t.opt.v[name] = arrays[f"optim.v/{name}"].astype(params[name].dtype)
        t.opt.steps = {k: int(v) for k, v in meta["optimizer_steps"].items()}
        t.next_epoch = int(meta["epoch"])
        t.curves = list(meta["curves"])
        return t


def load_model(prefix, kg: KnowledgeGraph) -> STEPModel:
    """Inference-only model from a checkpoint."""
    arrays, meta = load_arrays(prefix)
    cfg = TrainConfig.from_dict(meta["config"])
    model = STEPModel(cfg, kg, Vocabulary.from_json(meta["vocabulary"]))
    if model.frozen_hashes() != meta["frozen_hashes"]:
        raise CheckpointError("frozen encoder/decoder hashes differ from the checkpoint")
    assign_parameters(model.parameters(), arrays)
    return model


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    recall: dict
    distinct: dict
    rankings: list  # [{"sample_id", "topk": [{"item", "score"}]}]
    responses: list  # [{"sample_id", "text"}]
    n_eval_turns: int


def evaluate(model: STEPModel, dialogues: list[Dialogue], batch_size: int = 64, topk_out: int = 10) -> Evaluation:
    cfg = model.cfg
    samples = conv_samples(dialogues)
    max_k = max(cfg.eval.recall_ks) if cfg.eval.recall_ks else 1
    ranked_all, gold_all, texts, rankings, responses = [], [], [], [], []
    for k in range(0, len(samples), batch_size):
        chunk = samples[k:k + batch_size]
        ranked, gen_texts, _, scores = model.recommend_and_respond(chunk, cfg.eval.template,
                                                                   k=max(max_k, topk_out))
        for s, r, txt, sc in zip(chunk, ranked, gen_texts, scores):
            texts.append(txt)
            responses.append({"sample_id": s.id, "text": txt})
            if s.gold_items:
                ranked_all.append(r)
                gold_all.append(s.gold_items)
            col = model.item_column
            rankings.append({"sample_id": s.id,
                             "topk": [{"item": i, "score": float(sc[col[i]])} for i in r[:topk_out]]})
    n_items = len(model.item_ids)
    recall = {f"recall@{k}": recall_at_k(ranked_all, gold_all, k, n_items) for k in cfg.eval.recall_ks}
    distinct = {f"distinct@{n}": distinct_n(texts, n) for n in cfg.eval.distinct_ns}
    return Evaluation(recall, distinct, rankings, responses, len(ranked_all))


def train(cfg: TrainConfig, dataset: Dataset) -> tuple[Trainer, MetricsReport]:
    """Train from scratch and evaluate on the test split."""
    start = time.perf_counter()
    trainer = Trainer(cfg, dataset.kg, dataset.train)
    hashes_before = trainer.model.frozen_hashes()
    trainer.run()
    if trainer.model.frozen_hashes() != hashes_before:
        raise RuntimeError("frozen parameters changed during training")
    report = MetricsReport(cfg.seed, cfg.to_dict(), curves=list(trainer.curves), frozen_hashes=hashes_before)
    if dataset.test:
        ev = evaluate(trainer.model, dataset.test)
        report.recall, report.distinct, report.n_eval_turns = ev.recall, ev.distinct, ev.n_eval_turns
        report.n_generated = len(ev.responses)
    report.wall_clock_seconds = time.perf_counter() - start
    return trainer, report
