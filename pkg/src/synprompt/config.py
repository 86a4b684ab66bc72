"""Experiment configuration: one flat record, stored as a flat YAML mapping."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

TASKS = ("multilabel", "multiclass", "binary")
KINDS = ("text", "image", "both")
VARIANTS = ("synergistic", "dynamic-only", "static-only", "no-prompt")

# Output width of the classification head for each task.
TASK_CLASSES = {"multilabel": 23, "multiclass": 20, "binary": 1}


class ConfigError(ValueError):
    """Raised with every violated field listed, one per line."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config: " + "; ".join(problems))


@dataclass
class ExperimentConfig:
    # backbone
    d_model: int = 32  # 64/4/6 is the larger reference setting; see README
    n_heads: int = 4
    n_layers: int = 4
    image_tokens: int = 16
    patch_dim: int = 32
    codebook_size: int = 256
    max_text_len: int = 32
    vocab_size: int = 1000
    ln_eps: float = 1e-5
    pretrain_steps: int = 600
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 32
    n_pretrain: int = 2000

    # prompts
    prompt_len: int = 8
    prompt_depth: int = 4
    static_width: int = 0  # 0 means d_model
    bottleneck_ratio: int = 4
    reduction_ratio: float = 5.0
    adapter_scale: bool = True  # literal 1/r multiplier on the pre-activation
    adapter_reduce_width: bool = True  # hidden width round((d_I + d_T) / r)
    use_adapter: bool = True  # False pins the scaling factor to ones
    variant: str = "synergistic"
    prompt_init_std: float = 0.02
    static_init_noise: float = 0.01

    # data
    task: str = "multiclass"
    n_latent: int = 20
    text_len: int = 12
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    alpha_image: float = 0.25
    alpha_text: float = 0.25
    label_noise: float = 0.0
    proto_pool: int = 24
    eta_train: float = 0.5
    kind_train: str = "both"
    eta_test: float = 0.5
    kind_test: str = "both"

    # optimisation
    lr: float = 1e-3
    weight_decay: float = 2e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_frac: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    eval_batch: int = 128
    threshold: float = 0.5

    # seeds
    seed: int = 17
    backbone_seed: int = 0
    data_seed: int = 0
    eval_seeds: list = field(default_factory=lambda: [11, 13, 17, 19, 23])

    out_dir: str = "runs/default"

    @property
    def n_classes(self) -> int:
        return TASK_CLASSES[self.task]

    @property
    def d_static(self) -> int:
        return self.static_width or self.d_model

    def validate(self) -> "ExperimentConfig":
        bad = []

        def need(cond, msg):
            if not cond:
                bad.append(msg)

        need(self.task in TASKS, f"task: must be one of {TASKS}")
        need(self.kind_train in KINDS, f"kind_train: must be one of {KINDS}")
        need(self.kind_test in KINDS, f"kind_test: must be one of {KINDS}")
        need(self.variant in VARIANTS, f"variant: must be one of {VARIANTS}")
        need(self.d_model >= 1, "d_model: must be >= 1")
        need(self.n_heads >= 1 and self.d_model % max(self.n_heads, 1) == 0,
             "n_heads: must divide d_model")
        need(self.n_layers >= 1, "n_layers: must be >= 1")
        need(self.prompt_len >= 1, "prompt_len: must be >= 1")
        need(1 <= self.prompt_depth <= self.n_layers, "prompt_depth: must satisfy 1 <= M <= n_layers")
        need(self.reduction_ratio > 0, "reduction_ratio: must be > 0")
        need(self.bottleneck_ratio >= 1 and self.d_model // max(self.bottleneck_ratio, 1) >= 1,
             "bottleneck_ratio: d_model // ratio must be >= 1")
        need(0 <= self.text_len <= self.max_text_len, "text_len: must be in [0, max_text_len]")
        need(self.image_tokens >= 1, "image_tokens: must be >= 1")
        need(self.n_train >= 1 and self.n_val >= 1 and self.n_test >= 1, "n_train/n_val/n_test: must be >= 1")
        need(0.0 <= self.alpha_image <= 1.0, "alpha_image: must be in [0, 1]")
        need(0.0 <= self.alpha_text <= 1.0, "alpha_text: must be in [0, 1]")
        need(0.0 <= self.label_noise <= 1.0, "label_noise: must be in [0, 1]")
        need(0.0 <= self.eta_train <= 1.0, "eta_train: must be in [0, 1]")
        need(0.0 <= self.eta_test <= 1.0, "eta_test: must be in [0, 1]")
        need(1 <= self.proto_pool <= min(self.codebook_size, self.vocab_size),
             "proto_pool: must be in [1, min(codebook_size, vocab_size)]")
        need(self.n_latent >= 2, "n_latent: must be >= 2")
        need(self.lr > 0, "lr: must be > 0")
        need(self.weight_decay >= 0, "weight_decay: must be >= 0")
        need(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "beta1/beta2: must be in [0, 1)")
        need(0 <= self.warmup_frac < 1, "warmup_frac: must be in [0, 1)")
        need(self.epochs >= 1, "epochs: must be >= 1")
        need(self.batch_size >= 1, "batch_size: must be >= 1")
        need(0 < self.threshold < 1, "threshold: must be in (0, 1)")
        need(self.ln_eps > 0, "ln_eps: must be > 0")
        need(len(self.eval_seeds) >= 1, "eval_seeds: must be nonempty")
        if bad:
            raise ConfigError(bad)
        return self

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError([f"{k}: unknown key" for k in unknown])
        cfg = cls()
        problems = []
        for k, v in data.items():
            default = getattr(cfg, k)
            try:
                setattr(cfg, k, _coerce(v, default))
            except (TypeError, ValueError):
                problems.append(f"{k}: cannot interpret {v!r} as {type(default).__name__}")
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(["<file>: expected a flat key/value mapping"])
        return cls.from_dict(data)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def fingerprint(self, keys=None) -> str:
        d = self.to_dict()
        if keys is not None:
            d = {k: d[k] for k in keys}
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


BACKBONE_KEYS = (
    "d_model", "n_heads", "n_layers", "image_tokens", "patch_dim", "codebook_size",
    "max_text_len", "vocab_size", "ln_eps", "pretrain_steps", "pretrain_lr",
    "pretrain_batch", "n_pretrain", "backbone_seed",
) + ("task", "n_latent", "text_len", "alpha_image", "alpha_text", "label_noise",
     "proto_pool", "data_seed")

DATA_KEYS = (
    "task", "n_latent", "text_len", "n_train", "n_val", "n_test", "alpha_image",
    "alpha_text", "label_noise", "proto_pool", "image_tokens", "codebook_size",
    "vocab_size", "max_text_len", "data_seed",
)


def _coerce(value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
            return value.lower() in ("true", "yes", "1")
        raise ValueError(value)
    if isinstance(default, int):
        if isinstance(value, bool) or float(value) != int(float(value)):
            raise ValueError(value)
        return int(float(value))
    if isinstance(default, float):
        if isinstance(value, bool):
            raise ValueError(value)
        return float(value)
    if isinstance(default, list):
        if isinstance(value, str):
            value = [int(v) for v in value.replace(",", " ").split()]
        return [int(v) for v in value]
    return str(value)
