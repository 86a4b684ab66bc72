"""Toy two-stream transformer: an image-token stream and a text-token stream.

Each stream is a pre-LayerNorm encoder. The class token sits at position 0;
when prompts are supplied they occupy positions ``1 .. L_p`` and content
tokens follow. A missing modality is zero-filled: its content rows are exactly
zero while its class token is kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .config import ExperimentConfig
from .tensor_core import ContractError, DiffValue


class InputError(ValueError):
    pass


@dataclass
class Batch:
    image: np.ndarray  # [B, T_i] codebook ids
    text: np.ndarray  # [B, T] vocabulary ids, right-padded
    text_len: np.ndarray  # [B]
    present: np.ndarray  # [B, 2] (image_present, text_present)
    labels: np.ndarray  # [B, C]
    cases: np.ndarray  # [B]

    def __len__(self) -> int:
        return len(self.image)

    @classmethod
    def from_dataset(cls, data, idx=None) -> "Batch":
        if idx is None:
            idx = np.arange(len(data))
        idx = np.asarray(idx, dtype=np.int64)
        width = int(data.text_len[idx].max()) if len(idx) else 0
        return cls(
            image=data.image[idx],
            text=data.text[idx, :width],
            text_len=data.text_len[idx],
            present=data.present[idx],
            labels=data.labels[idx],
            cases=data.cases[idx],
        )

    @classmethod
    def from_sample(cls, sample) -> "Batch":
        from .missing_data import Dataset

        return cls.from_dataset(Dataset.from_samples([sample]))


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


class StreamEncoder:
    """One transformer stream. ``kind`` is ``"image"`` or ``"text"``."""

    def __init__(self, kind: str, cfg: ExperimentConfig, rng):
        d, n = cfg.d_model, cfg.n_layers
        self.kind = kind
        self.d = d
        self.n_heads = cfg.n_heads
        self.eps = cfg.ln_eps
        self.params: dict[str, DiffValue] = {}
        p = self.params
        if kind == "image":
            self.max_len = cfg.image_tokens
            # fixed synthetic patch codebook; never trained
            self.codebook = DiffValue(_normal(rng, (cfg.codebook_size, cfg.patch_dim), 1.0))
            p["patch_proj"] = DiffValue(_normal(rng, (cfg.patch_dim, d), 1.0 / math.sqrt(cfg.patch_dim)))
            p["patch_bias"] = DiffValue(np.zeros(d))
        elif kind == "text":
            self.max_len = cfg.max_text_len
            self.codebook = None
            p["token_table"] = DiffValue(_normal(rng, (cfg.vocab_size, d), 1.0))
        else:
            raise ValueError(f"unknown stream kind {kind!r}")
        p["pos"] = DiffValue(_normal(rng, (self.max_len + 1, d), 0.1))
        p["cls"] = DiffValue(_normal(rng, (1, d), 0.1))
        w = 1.0 / math.sqrt(d)
        w_out = w / math.sqrt(2 * n)
        for i in range(n):
            pre = f"block{i}."
            p[pre + "ln1_g"] = DiffValue(np.ones(d))
            p[pre + "ln1_b"] = DiffValue(np.zeros(d))
            for nm in ("wq", "wk", "wv"):
                p[pre + nm] = DiffValue(_normal(rng, (d, d), w))
                p[pre + "b" + nm[1]] = DiffValue(np.zeros(d))
            p[pre + "wo"] = DiffValue(_normal(rng, (d, d), w_out))
            p[pre + "bo"] = DiffValue(np.zeros(d))
            p[pre + "ln2_g"] = DiffValue(np.ones(d))
            p[pre + "ln2_b"] = DiffValue(np.zeros(d))
            p[pre + "w1"] = DiffValue(_normal(rng, (d, 4 * d), w))
            p[pre + "b1"] = DiffValue(np.zeros(4 * d))
            p[pre + "w2"] = DiffValue(_normal(rng, (4 * d, d), w_out))
            p[pre + "b2"] = DiffValue(np.zeros(d))
        for k, v in p.items():
            v.name = f"{kind}.{k}"
        self.n_layers = n

    def set_trainable(self, flag: bool) -> None:
        for v in self.params.values():
            v.requires_grad = flag

    def block(self, i: int) -> dict[str, DiffValue]:
        pre = f"block{i}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    # -- embedding ---------------------------------------------------------

    def embed(self, ids: np.ndarray, lengths: np.ndarray, present: np.ndarray) -> DiffValue:
        """[B, T] ids -> [B, 1+T, d] tokens; missing or padded rows are zero."""
        ids = np.asarray(ids, dtype=np.int64)
        b, t = ids.shape
        if t > self.max_len:
            raise InputError(f"{self.kind} sequence of length {t} exceeds maximum {self.max_len}")
        limit = self.codebook.shape[0] if self.kind == "image" else self.params["token_table"].shape[0]
        valid = (np.arange(t)[None, :] < lengths[:, None]) & present[:, None]
        bad = valid & ((ids < 0) | (ids >= limit))
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise InputError(
                f"{self.kind} token {int(ids[row, col])} at sample {row}, position {col} "
                f"is outside [0, {limit})"
            )
        safe = np.where(valid, ids, 0)
        p = self.params
        cls_row = tc.add(tc.gather(p["cls"], np.zeros((b, 1), dtype=np.int64)),
                         tc.gather(p["pos"], np.zeros((b, 1), dtype=np.int64)))
        if t == 0:
            return cls_row
        if self.kind == "image":
            patches = tc.gather(self.codebook, safe)
            content = tc.linear(patches, p["patch_proj"], p["patch_bias"])
        else:
            content = tc.gather(p["token_table"], safe)
        pos_idx = np.broadcast_to(np.arange(1, t + 1), (b, t))
        content = tc.add(content, tc.gather(p["pos"], pos_idx))
        mask = np.broadcast_to(valid[:, :, None], (b, t, self.d)).astype(np.float64)
        content = tc.mul(content, DiffValue(mask))
        return tc.concat([cls_row, content], axis=1)

    # -- transformer -------------------------------------------------------

    def _layer(self, x: DiffValue, i: int, key_bias, cls_only: bool) -> DiffValue:
        blk = self.block(i)
        h = self.n_heads
        dh = self.d // h
        y = tc.layer_norm(x, blk["ln1_g"], blk["ln1_b"], self.eps)
        q_src = tc.take(y, 0, 1, axis=1) if cls_only else y
        q = tc.split_heads(tc.linear(q_src, blk["wq"], blk["bq"]), h)
        k = tc.split_heads(tc.linear(y, blk["wk"], blk["bk"]), h)
        v = tc.split_heads(tc.linear(y, blk["wv"], blk["bv"]), h)
        scores = tc.scale(tc.matmul(q, tc.transpose(k)), 1.0 / math.sqrt(dh))
        if key_bias is not None:
            scores = tc.add(scores, key_bias)
        att = tc.matmul(tc.softmax(scores), v)
        out = tc.linear(tc.merge_heads(att, h), blk["wo"], blk["bo"])
        resid = tc.take(x, 0, 1, axis=1) if cls_only else x
        x = tc.add(resid, out)
        y = tc.layer_norm(x, blk["ln2_g"], blk["ln2_b"], self.eps)
        ff = tc.linear(tc.gelu(tc.linear(y, blk["w1"], blk["b1"])), blk["w2"], blk["b2"])
        return tc.add(x, ff)

    def _key_bias(self, key_valid: np.ndarray | None):
        if key_valid is None or key_valid.all():
            return None
        bias = np.where(key_valid, 0.0, -1e30)[:, None, :]  # [B, 1, L]
        bias = np.repeat(bias, self.n_heads, axis=0)  # [B*H, 1, L]
        return DiffValue(bias)


def encode_stream(tokens: DiffValue, enc: StreamEncoder, prompt_blocks=None,
                  key_valid: np.ndarray | None = None, cls_only: bool = False):
    """Run one stream.

    ``prompt_blocks`` is ``None`` or a list of M blocks, each [B, L_p, d]; block
    ``i`` occupies the prompt positions entering layer ``i`` (replacing the
    previous block). Positions after layer M keep whatever the layers produced.
    Returns ``(tokens [B, L, d] without prompt positions, class feature [B, d])``;
    with ``cls_only`` the last layer is evaluated for the class row only and the
    returned token tensor is ``None``.
    """
    b, length, d = tokens.shape
    if d != enc.d:
        raise ContractError(f"token width {d} does not match encoder width {enc.d}")
    if key_valid is None:
        key_valid = np.ones((b, length), dtype=bool)
    lp = 0
    if prompt_blocks:
        if len(prompt_blocks) > enc.n_layers:
            raise ContractError(f"{len(prompt_blocks)} prompt blocks for {enc.n_layers} layers")
        lp = prompt_blocks[0].shape[1]
        for blk in prompt_blocks:
            if blk.ndim != 3 or blk.shape != (b, lp, d):
                raise ContractError(f"prompt block shape {blk.shape}, expected {(b, lp, d)}")
        key_valid = np.concatenate([key_valid[:, :1], np.ones((b, lp), dtype=bool), key_valid[:, 1:]], axis=1)
    key_bias = enc._key_bias(key_valid)
    x = tokens
    for i in range(enc.n_layers):
        if prompt_blocks and i < len(prompt_blocks):
            head = tc.take(x, 0, 1, axis=1)
            tail = tc.take(x, 1 + (lp if i > 0 else 0), x.shape[1], axis=1)
            x = tc.concat([head, prompt_blocks[i], tail], axis=1)
        last = i == enc.n_layers - 1
        x = enc._layer(x, i, key_bias, cls_only and last)
    cls = tc.reshape(tc.take(x, 0, 1, axis=1), (b, d))
    if cls_only:
        return None, cls
    if lp:
        x = tc.concat([tc.take(x, 0, 1, axis=1), tc.take(x, 1 + lp, x.shape[1], axis=1)], axis=1)
    return x, cls


@dataclass
class BackboneBundle:
    image: StreamEncoder
    text: StreamEncoder
    frozen: bool = False
    meta: dict = field(default_factory=dict)

    def parameters(self) -> dict[str, DiffValue]:
        out = {f"image.{k}": v for k, v in self.image.params.items()}
        out.update({f"text.{k}": v for k, v in self.text.params.items()})
        out["image.codebook"] = self.image.codebook
        return out

    def trainable_parameters(self) -> dict[str, DiffValue]:
        if self.frozen:
            return {}
        return {k: v for k, v in self.parameters().items() if k != "image.codebook"}

    def freeze(self) -> "BackboneBundle":
        self.image.set_trainable(False)
        self.text.set_trainable(False)
        self.frozen = True
        return self

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def checksum(self) -> str:
        from .checkpoint import checksum

        return checksum(self.arrays())

    def save(self, path) -> str:
        from . import checkpoint

        return checkpoint.save(path, {"backbone": self.arrays()}, meta=self.meta)

    @classmethod
    def load(cls, path, cfg: ExperimentConfig) -> "BackboneBundle":
        from . import checkpoint

        sections, header = checkpoint.load(path)
        bundle = new_backbone(cfg)
        arrays = sections["backbone"]
        params = bundle.parameters()
        if set(arrays) != set(params):
            raise ValueError(f"{path}: backbone array names do not match the configuration")
        for k, v in params.items():
            if arrays[k].shape != v.shape:
                raise ValueError(f"{path}: {k} has shape {arrays[k].shape}, expected {v.shape}")
            v.data = arrays[k]
        bundle.meta = header.get("meta", {})
        return bundle.freeze()


def new_backbone(cfg: ExperimentConfig) -> BackboneBundle:
    rng = np.random.default_rng([cfg.backbone_seed, 7])
    return BackboneBundle(StreamEncoder("image", cfg, rng), StreamEncoder("text", cfg, rng))


def embed_batch(batch: Batch, bundle: BackboneBundle):
    """Return ``(image tokens, text tokens, image key mask, text key mask)``."""
    b = len(batch)
    t_img = batch.image.shape[1]
    img = bundle.image.embed(batch.image, np.full(b, t_img), batch.present[:, 0])
    txt = bundle.text.embed(batch.text, batch.text_len, batch.present[:, 1])
    img_valid = np.ones((b, 1 + t_img), dtype=bool)
    t = batch.text.shape[1]
    txt_valid = np.concatenate(
        [np.ones((b, 1), dtype=bool), np.arange(t)[None, :] < batch.text_len[:, None]], axis=1
    )
    return img, txt, img_valid, txt_valid


def embed_inputs(sample, bundle: BackboneBundle) -> tuple[np.ndarray, np.ndarray]:
    """Single-sample embedding: ``([1+T_i, d], [1+T_t, d])`` arrays."""
    img, txt, _, _ = embed_batch(Batch.from_sample(sample), bundle)
    return img.data[0], txt.data[0]


def class_features(batch: Batch, bundle: BackboneBundle) -> tuple[DiffValue, DiffValue]:
    """Prompt-free class features of both streams (zero-filled inputs where missing)."""
    img, txt, iv, tv = embed_batch(batch, bundle)
    _, fi = encode_stream(img, bundle.image, key_valid=iv, cls_only=True)
    _, ft = encode_stream(txt, bundle.text, key_valid=tv, cls_only=True)
    return fi, ft


def pretrain_backbone(cfg: ExperimentConfig, data) -> BackboneBundle:
    """Train both streams and a throwaway linear head on complete data, then freeze."""
    from .optim import OptimizerState, adamw_step, compute_loss, lr_at

    if len(data) == 0:
        raise InputError("pretraining needs at least one sample")
    if not data.present.all():
        first = int(np.flatnonzero(~data.present.all(axis=1))[0])
        raise InputError(f"pretraining data must be complete; sample {int(data.ids[first])} is not")
    bundle = new_backbone(cfg)
    bundle.image.set_trainable(True)
    bundle.text.set_trainable(True)
    rng = np.random.default_rng([cfg.backbone_seed, 8])
    d, c = cfg.d_model, cfg.n_classes
    head_w = DiffValue(_normal(rng, (2 * d, c), 1.0 / math.sqrt(2 * d)), requires_grad=True)
    head_b = DiffValue(np.zeros(c), requires_grad=True)
    params = dict(bundle.trainable_parameters())
    params["head.w"], params["head.b"] = head_w, head_b
    state = OptimizerState(lr=cfg.pretrain_lr, beta1=cfg.beta1, beta2=cfg.beta2,
                           eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    losses = []
    steps = cfg.pretrain_steps
    for step in range(steps):
        idx = rng.choice(len(data), size=min(cfg.pretrain_batch, len(data)), replace=False)
        batch = Batch.from_dataset(data, idx)
        for p in params.values():
            p.zero_grad()
        with tc.Tape() as tape:
            fi, ft = class_features(batch, bundle)
            logits = tc.add(tc.matmul(tc.concat([fi, ft], axis=-1), head_w), head_b)
            loss = compute_loss(logits, batch.labels, cfg.task)
        tc.backward(tape, loss)
        losses.append(float(loss.data))
        adamw_step(params, state, lr_at(step + 1, steps, cfg.pretrain_lr, cfg.warmup_frac))
    bundle.meta = {
        "seed": cfg.backbone_seed,
        "steps": steps,
        "initial_loss": losses[0] if losses else None,
        "final_loss": losses[-1] if losses else None,
        "losses": losses,
    }
    return bundle.freeze()
