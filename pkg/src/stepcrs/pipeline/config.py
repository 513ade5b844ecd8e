"""Layered training configuration: defaults < JSON file < dotted overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 64
    num_queries: int = 32
    fformer_layers: int = 2
    text_keys: str = "cls"
    prefix_conv: int = 16
    prefix_rec: int = 8
    lam: float = 0.1
    eq23_h: str = "mentioned-mean"
    rgcn_activation: str = "relu"
    rgcn_init: str = "identity"
    add_inverse_relations: bool = True
    entity_init_std: float = 0.25
    query_init_std: float = 0.02
    # frozen stand-in LMs: token/position embedding scales and encoder output gain
    standin_emb_std: float = 0.02
    standin_pos_scale: float = 0.02
    encoder_out_scale: float = 0.125
    standin_attn_std: float = 0.25
    decoder_norm: str = "post"
    prefix_init_std: float = 0.1
    max_context_len: int = 256
    decoder_context_len: int = 128
    max_response_len: int = 32
    dtype: str = "float32"


@dataclass
class ObjectiveConfig:
    temperature: float = 0.2
    margin: float = 0.2
    label_smoothing: float = 0.1
    mask_label_collisions: bool = True


@dataclass
class CurriculumConfig:
    e1: int = 2
    e2: int = 3
    en: int = 5


@dataclass
class OptimConfig:
    batch_size_rec: int = 54
    batch_size_conv: int = 24
    lr_pretrain: float = 5e-3
    lr_finetune: float = 1e-3
    alpha: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    freeze_query_bank_finetune: bool = False
    # phase B updates the shared entity/fusion encoders too (otherwise only the conversation head)
    finetune_shared: bool = False
    joint: bool = False
    finetune: bool = True


@dataclass
class AblationConfig:
    no_curriculum: bool = False
    no_task1: bool = False
    no_task2: bool = False
    no_task3: bool = False


@dataclass
class EvalConfig:
    template: str = "generated"
    gen_max_len: int = 20
    recall_ks: list = field(default_factory=lambda: [1, 10, 50])
    distinct_ns: list = field(default_factory=lambda: [2, 3, 4])


@dataclass
class DataConfig:
    dir: str = ""
    kg: str = "kg.tsv"
    items: str = "items.txt"
    train: str = "corpus.train.jsonl"
    valid: str = "corpus.valid.jsonl"
    test: str = "corpus.test.jsonl"


@dataclass
class TrainConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "TrainConfig":
        o, c, m = self.optim, self.curriculum, self.model
        if o.lr_pretrain <= 0 or o.lr_finetune <= 0:
            raise ConfigError("learning rates must be > 0")
        if o.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not 0 <= c.e1 <= c.e2 <= c.en:
            raise ConfigError(f"curriculum boundaries must satisfy 0 <= E1 <= E2 <= En, got {c.e1}, {c.e2}, {c.en}")
        if o.batch_size_rec < 1 or o.batch_size_conv < 1:
            raise ConfigError("batch sizes must be >= 1")
        if m.num_queries < 1 or m.dim < 1 or m.prefix_conv < 0 or m.prefix_rec < 0:
            raise ConfigError("model sizes must be positive")
        if m.text_keys not in ("cls", "tokens"):
            raise ConfigError("model.text_keys must be 'cls' or 'tokens'")
        if m.eq23_h not in ("mentioned-mean", "gold-item"):
            raise ConfigError("model.eq23_h must be 'mentioned-mean' or 'gold-item'")
        if m.rgcn_init not in ("gaussian", "identity"):
            raise ConfigError("model.rgcn_init must be 'gaussian' or 'identity'")
        if m.decoder_norm not in ("pre", "post"):
            raise ConfigError("model.decoder_norm must be 'pre' or 'post'")
        if m.dtype not in ("float32", "float64"):
            raise ConfigError("model.dtype must be float32 or float64")
        if self.eval.template not in ("generated", "gold"):
            raise ConfigError("eval.template must be 'generated' or 'gold'")
        if self.objective.temperature <= 0 or self.objective.margin < 0 \
                or not 0 <= self.objective.label_smoothing < 1:
            raise ConfigError("objective: need temperature > 0, margin >= 0, 0 <= label_smoothing < 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        cfg = cls()
        apply_dict(cfg, data)
        return cfg

    def copy(self) -> "TrainConfig":
        return TrainConfig.from_dict(self.to_dict())


def apply_dict(obj, data: dict, prefix: str = "") -> None:
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix + key!r} expects an object")
            apply_dict(current, value, prefix + key + ".")
        else:
            setattr(obj, key, _coerce(value, current, prefix + key))


def _coerce(value: Any, current: Any, key: str):
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                low = value.lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, list):
            if isinstance(value, str):
                return [int(v) for v in value.split(",") if v.strip()]
            return list(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {value!r} for config key {key!r}") from exc


def set_path(cfg: TrainConfig, dotted: str, value: Any) -> None:
    parts = dotted.replace("-", "_").split(".")
    target = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(target) or p not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config key {dotted!r}")
        target = getattr(target, p)
    apply_dict(target, {parts[-1]: value}, prefix=".".join(parts[:-1]) + "." if len(parts) > 1 else "")


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    cfg = TrainConfig()
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        apply_dict(cfg, data)
    for k, v in (overrides or {}).items():
        set_path(cfg, k, v)
    return cfg.validate()
