"""Synergistic prompts: dynamic adapter, base/static prompts and layer-wise propagation.

Shapes, with B the batch size, L_p the prompt length and d the token width:

* pooled features ``X_C``: [B, d_I + d_T] (image block first),
* scaling factor ``S_d``: [B, d], shared by both streams and broadcast over prompt rows,
* base prompts: one [L_p, d] table per missing case and stream,
* every prompt block handed to a stream: [B, L_p, d].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .backbone import Batch, BackboneBundle, class_features, embed_batch, encode_stream
from .config import ExperimentConfig
from .missing_data import COMPLETE, IMAGE_MISSING, TEXT_MISSING
from .tensor_core import ContractError, DiffValue

CASES = (COMPLETE, TEXT_MISSING, IMAGE_MISSING)


@dataclass
class FeatureBundle:
    x_image: np.ndarray  # [B, d_I]
    x_text: np.ndarray  # [B, d_T]

    @property
    def x_concat(self) -> np.ndarray:
        return np.concatenate([self.x_image, self.x_text], axis=-1)


def pool_features(batch: Batch, backbone: BackboneBundle) -> FeatureBundle:
    """Prompt-free class features per stream; the block of a missing modality is zero."""
    if not backbone.frozen:
        raise ContractError("pool_features needs a frozen backbone")
    full = Batch(batch.image, batch.text, batch.text_len, np.ones_like(batch.present),
                 batch.labels, batch.cases)
    fi, ft = class_features(full, backbone)
    return FeatureBundle(
        np.where(batch.present[:, :1], fi.data, 0.0),
        np.where(batch.present[:, 1:], ft.data, 0.0),
    )


def _param(rng, shape, std, name):
    return DiffValue(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


class PromptStack:
    """All trainable prompt parameters, addressed by name in ``self.params``."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        rng = np.random.default_rng([seed, 3])
        d, lp, ds = cfg.d_model, cfg.prompt_len, cfg.d_static
        din = 2 * d
        self.cfg = cfg
        self.d = d
        self.prompt_len = lp
        self.depth = cfg.prompt_depth
        r = cfg.reduction_ratio
        self.hidden = max(1, round(din / r)) if cfg.adapter_reduce_width else din
        self.inv_r = 1.0 / r if cfg.adapter_scale else 1.0
        h = self.hidden
        p: dict[str, DiffValue] = {}
        # dynamic adapter
        p["adapter.w1"] = _param(rng, (din, h), 1.0 / math.sqrt(din), "adapter.w1")
        p["adapter.b1"] = DiffValue(np.zeros(h), True, "adapter.b1")
        p["adapter.w2"] = _param(rng, (h, d), 1.0 / math.sqrt(h), "adapter.w2")
        p["adapter.b2"] = DiffValue(np.zeros(d), True, "adapter.b2")
        # per-case base prompts, rows indexed by case id
        p["base.image"] = _param(rng, (len(CASES), lp, d), cfg.prompt_init_std, "base.image")
        p["base.text"] = _param(rng, (len(CASES), lp, d), cfg.prompt_init_std, "base.text")
        # shared static prompt and its two projections
        p["static.prompt"] = _param(rng, (lp, ds), cfg.prompt_init_std, "static.prompt")
        for s in ("image", "text"):
            if ds == d:
                g = np.eye(d) + rng.normal(0.0, cfg.static_init_noise, size=(d, d))
            else:
                g = rng.normal(0.0, 1.0 / math.sqrt(ds), size=(ds, d))
            p[f"static.proj_{s}"] = DiffValue(g, True, f"static.proj_{s}")
        # layer-wise propagation, levels 2..M
        bott = max(1, d // cfg.bottleneck_ratio)
        for s in ("image", "text"):
            for level in range(2, self.depth + 1):
                pre = f"prop.{s}.{level}."
                p[pre + "fc1"] = _param(rng, (d, bott), 1.0 / math.sqrt(d), pre + "fc1")
                p[pre + "fc1_b"] = DiffValue(np.zeros(bott), True, pre + "fc1_b")
                p[pre + "fc2"] = _param(rng, (bott, d), 1.0 / math.sqrt(bott), pre + "fc2")
                p[pre + "fc2_b"] = DiffValue(np.zeros(d), True, pre + "fc2_b")
                p[pre + "ln_g"] = DiffValue(np.ones(d), True, pre + "ln_g")
                p[pre + "ln_b"] = DiffValue(np.zeros(d), True, pre + "ln_b")
        self.params = p

    def group(self, prefix: str) -> dict[str, DiffValue]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise ValueError("prompt array names do not match the configuration")
        for k, v in self.params.items():
            v.data = np.array(arrays[k], dtype=np.float64)


class Head:
    """Linear classifier over ``[image feature, text feature]``."""

    def __init__(self, d_in: int, n_out: int, seed: int, std: float = 0.02):
        rng = np.random.default_rng([seed, 4])
        self.params = {
            "head.w": DiffValue(rng.normal(0.0, std, size=(d_in, n_out)), True, "head.w"),
            "head.b": DiffValue(np.zeros(n_out), True, "head.b"),
        }


# ---------------------------------------------------------------------------
# the individual steps


def compute_scaling_factor(x_concat, stack: PromptStack) -> DiffValue:
    """S_d = sigmoid(ReLU((1/r) X_C W1 + b1) W2 + b2), one row per sample."""
    x = x_concat if isinstance(x_concat, DiffValue) else DiffValue(np.atleast_2d(x_concat))
    p = stack.params
    if x.shape[-1] != p["adapter.w1"].shape[0]:
        raise ContractError(
            f"adapter expects {p['adapter.w1'].shape[0]} input features, got {x.shape[-1]}"
        )
    pre = tc.add(tc.scale(tc.matmul(x, p["adapter.w1"]), stack.inv_r), p["adapter.b1"])
    return tc.sigmoid(tc.add(tc.matmul(tc.relu(pre), p["adapter.w2"]), p["adapter.b2"]))


def select_base(stack: PromptStack, cases) -> tuple[DiffValue, DiffValue]:
    cases = np.asarray(cases, dtype=np.int64)
    if cases.size and not np.isin(cases, CASES).all():
        raise ContractError(f"unknown missing case in {np.unique(cases).tolist()}")
    return tc.gather(stack.params["base.image"], cases), tc.gather(stack.params["base.text"], cases)


def modulate_base_prompts(base: tuple[DiffValue, DiffValue], s: DiffValue | None):
    """Row-broadcast elementwise product of each [B, L_p, d] base block with S_d [B, d]."""
    if s is None:
        return base
    b, d = s.shape
    s3 = tc.reshape(s, (b, 1, d))
    return tc.mul(base[0], s3), tc.mul(base[1], s3)


def project_static(stack: PromptStack) -> tuple[DiffValue, DiffValue]:
    """(P_S G_I, P_S G_T), each [L_p, d]."""
    p = stack.params
    return (tc.matmul(p["static.prompt"], p["static.proj_image"]),
            tc.matmul(p["static.prompt"], p["static.proj_text"]))


def combine_synergistic(dynamic, static):
    for a, b in zip(dynamic, static):
        if a.shape != b.shape:
            raise ContractError(f"cannot combine prompt blocks of shapes {a.shape} and {b.shape}")
    return tc.add(dynamic[0], static[0]), tc.add(dynamic[1], static[1])


def _tile(block: DiffValue, b: int) -> DiffValue:
    """[L_p, d] -> [B, L_p, d] (differentiable copy per sample)."""
    lp, d = block.shape
    return tc.gather(tc.reshape(block, (1, lp, d)), np.zeros(b, dtype=np.int64))


def _propagate_one(x: DiffValue, stack: PromptStack, stream: str, level: int, eps: float) -> DiffValue:
    p = stack.params
    pre = f"prop.{stream}.{level}."
    h = tc.gelu(tc.add(tc.matmul(x, p[pre + "fc1"]), p[pre + "fc1_b"]))
    h = tc.add(tc.matmul(h, p[pre + "fc2"]), p[pre + "fc2_b"])
    return tc.layer_norm(h, p[pre + "ln_g"], p[pre + "ln_b"], eps)


def propagate_prompts(level1, stack: PromptStack, eps: float = 1e-5):
    """Level 1 is the input pair; level i = LN(FC(GeLU(FC(level i-1)))) per stream."""
    image, text = [level1[0]], [level1[1]]
    for level in range(2, stack.depth + 1):
        image.append(_propagate_one(image[-1], stack, "image", level, eps))
        text.append(_propagate_one(text[-1], stack, "text", level, eps))
    return image, text


def fuse_and_classify(f_image: DiffValue, f_text: DiffValue, head: Head) -> DiffValue:
    w, b = head.params["head.w"], head.params["head.b"]
    if f_image.shape[-1] + f_text.shape[-1] != w.shape[0]:
        raise ContractError(
            f"head expects {w.shape[0]} inputs, got {f_image.shape[-1]} + {f_text.shape[-1]}"
        )
    return tc.add(tc.matmul(tc.concat([f_image, f_text], axis=-1), w), b)


# ---------------------------------------------------------------------------
# whole model


class SyPModel:
    """Frozen backbone + prompt stack + head, configured by ``cfg.variant``."""

    def __init__(self, cfg: ExperimentConfig, backbone: BackboneBundle, seed: int):
        if not backbone.frozen:
            raise ContractError("SyPModel needs a frozen backbone")
        self.cfg = cfg
        self.backbone = backbone
        self.prompts = PromptStack(cfg, seed)
        self.head = Head(2 * cfg.d_model, cfg.n_classes, seed)
        self.variant = cfg.variant
        self.use_adapter = cfg.use_adapter

    @property
    def uses_dynamic(self) -> bool:
        return self.variant in ("synergistic", "dynamic-only")

    @property
    def uses_static(self) -> bool:
        return self.variant in ("synergistic", "static-only")

    def registry(self) -> dict[str, DiffValue]:
        """Trainable parameters for this variant: used prompt parts plus the head."""
        reg = {}
        if self.variant != "no-prompt":
            if self.uses_dynamic:
                reg.update(self.prompts.group("base."))
                if self.use_adapter:
                    reg.update(self.prompts.group("adapter."))
            if self.uses_static:
                reg.update(self.prompts.group("static."))
            reg.update(self.prompts.group("prop."))
        reg.update(self.head.params)
        return reg

    def all_parameters(self) -> dict[str, DiffValue]:
        out = dict(self.prompts.params)
        out.update(self.head.params)
        return out

    def prompt_blocks(self, batch: Batch, x_concat=None):
        """Per-layer prompt blocks for both streams (lists of M [B, L_p, d])."""
        b = len(batch)
        parts = []
        if self.uses_dynamic:
            base = select_base(self.prompts, batch.cases)
            s = None
            if self.use_adapter:
                if x_concat is None:
                    x_concat = pool_features(batch, self.backbone).x_concat
                s = compute_scaling_factor(x_concat, self.prompts)
            parts.append(modulate_base_prompts(base, s))
        if self.uses_static:
            si, st = project_static(self.prompts)
            parts.append((_tile(si, b), _tile(st, b)))
        level1 = parts[0] if len(parts) == 1 else combine_synergistic(parts[0], parts[1])
        return propagate_prompts(level1, self.prompts, self.cfg.ln_eps)

    def logits(self, batch: Batch, x_concat=None, plain_features=None) -> DiffValue:
        """Forward pass.

        ``x_concat`` optionally supplies cached pooled features for the adapter;
        ``plain_features`` optionally supplies cached prompt-free class features
        (used only by the no-prompt variant).
        """
        if self.variant == "no-prompt":
            if plain_features is None:
                fi, ft = class_features(batch, self.backbone)
            else:
                fi, ft = (DiffValue(a) for a in plain_features)
            return fuse_and_classify(fi, ft, self.head)
        img_blocks, txt_blocks = self.prompt_blocks(batch, x_concat)
        img, txt, iv, tv = embed_batch(batch, self.backbone)
        _, fi = encode_stream(img, self.backbone.image, img_blocks, iv, cls_only=True)
        _, ft = encode_stream(txt, self.backbone.text, txt_blocks, tv, cls_only=True)
        return fuse_and_classify(fi, ft, self.head)


def forward_syp(sample_or_batch, model: SyPModel, x_concat=None) -> DiffValue:
    """Logits for one :class:`ModalitySample` ([C]) or a :class:`Batch` ([B, C])."""
    if isinstance(sample_or_batch, Batch):
        return model.logits(sample_or_batch, x_concat)
    out = model.logits(Batch.from_sample(sample_or_batch), x_concat)
    return tc.reshape(out, (out.shape[-1],))
