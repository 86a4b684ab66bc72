"""Prompt tuning over a frozen backbone."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .backbone import Batch, BackboneBundle, class_features
from .config import ExperimentConfig
from .metrics import task_metric
from .missing_data import Dataset
from .optim import OptimizerState, adamw_step, compute_loss, lr_at, total_steps
from .prompts import SyPModel, pool_features

log = logging.getLogger(__name__)


class TrainingConfigError(ValueError):
    pass


@dataclass
class TrainPlan:
    registry: dict
    total_steps: int
    epochs: int
    batch_size: int
    task: str
    seed: int
    lr: float = 1e-3
    weight_decay: float = 2e-2
    warmup_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    threshold: float = 0.5
    eval_batch: int = 128

    @classmethod
    def for_model(cls, model: SyPModel, n_train: int, cfg: ExperimentConfig, seed: int) -> "TrainPlan":
        return cls(
            registry=model.registry(),
            total_steps=total_steps(n_train, cfg.batch_size, cfg.epochs),
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            task=cfg.task,
            seed=seed,
            lr=cfg.lr,
            weight_decay=cfg.weight_decay,
            warmup_frac=cfg.warmup_frac,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.adam_eps,
            threshold=cfg.threshold,
            eval_batch=cfg.eval_batch,
        )


@dataclass
class TrainResult:
    log: list = field(default_factory=list)  # dicts: epoch, train_loss, val_metric, lr
    best_epoch: int = 0
    best_val: float = float("-inf")


def check_registry(registry: dict, backbone: BackboneBundle) -> None:
    backbone_ids = {id(v) for v in backbone.parameters().values()}
    leaked = [name for name, v in registry.items() if id(v) in backbone_ids]
    if leaked:
        raise TrainingConfigError(f"backbone parameters in the trainable registry: {leaked}")


class FeatureCache:
    """Frozen-backbone features of a fixed dataset, computed once."""

    def __init__(self, model: SyPModel, data: Dataset, batch: int = 256):
        self.x_concat = None
        self.plain = None
        if model.variant == "no-prompt":
            chunks = [class_features(Batch.from_dataset(data, idx), model.backbone)
                      for idx in _chunks(len(data), batch)]
            self.plain = (np.concatenate([c[0].data for c in chunks]),
                          np.concatenate([c[1].data for c in chunks]))
        elif model.uses_dynamic and model.use_adapter:
            self.x_concat = np.concatenate([
                pool_features(Batch.from_dataset(data, idx), model.backbone).x_concat
                for idx in _chunks(len(data), batch)
            ])

    def take(self, idx):
        xc = None if self.x_concat is None else self.x_concat[idx]
        plain = None if self.plain is None else (self.plain[0][idx], self.plain[1][idx])
        return xc, plain


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(n, start + size))


def predict(model: SyPModel, data: Dataset, batch: int = 128, cache: FeatureCache | None = None) -> np.ndarray:
    """Scores [N, C] without recording a tape."""
    if cache is None:
        cache = FeatureCache(model, data)
    out = []
    for idx in _chunks(len(data), batch):
        xc, plain = cache.take(idx)
        out.append(model.logits(Batch.from_dataset(data, idx), xc, plain).data)
    if not out:
        return np.zeros((0, model.cfg.n_classes))
    return np.concatenate(out)


def evaluate(model: SyPModel, data: Dataset, task: str, threshold: float = 0.5,
             batch: int = 128, cache: FeatureCache | None = None) -> float:
    return task_metric(predict(model, data, batch, cache), data.labels, task, threshold)


def train_prompts(plan: TrainPlan, model: SyPModel, train: Dataset, val: Dataset) -> TrainResult:
    """Tune ``plan.registry`` on ``train`` (presence already applied).

    After the last epoch the registry is restored to the epoch with the best
    validation metric.
    """
    if not model.backbone.frozen:
        raise TrainingConfigError("backbone must be frozen before prompt tuning")
    check_registry(plan.registry, model.backbone)
    registry = plan.registry
    rng = np.random.default_rng([plan.seed, 5])
    state = OptimizerState(lr=plan.lr, beta1=plan.beta1, beta2=plan.beta2, eps=plan.eps,
                           weight_decay=plan.weight_decay)
    train_cache = FeatureCache(model, train)
    val_cache = FeatureCache(model, val)
    result = TrainResult()
    best = {k: v.data.copy() for k, v in registry.items()}
    n = len(train)
    step = 0
    for epoch in range(1, plan.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        lr = 0.0
        for start in range(0, n, plan.batch_size):
            idx = order[start : start + plan.batch_size]
            batch = Batch.from_dataset(train, idx)
            xc, plain = train_cache.take(idx)
            for p in registry.values():
                p.zero_grad()
            with tc.Tape() as tape:
                logits = model.logits(batch, xc, plain)
                loss = compute_loss(logits, batch.labels, plan.task)
            tc.backward(tape, loss)
            step += 1
            lr = lr_at(min(step, plan.total_steps), plan.total_steps, plan.lr, plan.warmup_frac)
            adamw_step(registry, state, lr)
            loss_sum += float(loss.data) * len(idx)
        val_metric = evaluate(model, val, plan.task, plan.threshold, plan.eval_batch, val_cache)
        row = {"epoch": epoch, "train_loss": loss_sum / n, "val_metric": val_metric, "lr": lr}
        result.log.append(row)
        log.info("epoch %d loss %.5f val %.4f lr %.2e", epoch, row["train_loss"], val_metric, lr)
        if val_metric > result.best_val:
            result.best_val = val_metric
            result.best_epoch = epoch
            best = {k: v.data.copy() for k, v in registry.items()}
    for k, v in registry.items():
        v.data = best[k]
    for p in registry.values():
        p.zero_grad()
    return result
