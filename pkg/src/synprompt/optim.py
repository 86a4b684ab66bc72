"""Task losses, AdamW with decoupled weight decay, and the warmup/decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .tensor_core import DiffValue


class NonFiniteGradient(FloatingPointError):
    pass


def compute_loss(logits: DiffValue, labels, task: str) -> DiffValue:
    """Mean loss over the batch.

    ``labels`` is the [B, C] label-vector array (one-hot for multiclass,
    a single column for binary).
    """
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    if labels.size and (labels.min() < 0 or labels.max() > 1):
        raise ValueError(f"labels must be 0/1 vectors, got range [{labels.min()}, {labels.max()}]")
    if task == "multiclass":
        if labels.shape != logits.shape or not np.all(labels.sum(axis=1) == 1):
            raise ValueError("multiclass labels must be one-hot rows matching the logits")
        return tc.softmax_cross_entropy(logits, labels.argmax(axis=1))
    if task in ("multilabel", "binary"):
        return tc.bce_with_logits(logits, labels)
    raise ValueError(f"unknown task {task!r}")


def lr_at(step: float, total: float, peak: float, warmup_frac: float = 0.1) -> float:
    """Linear ramp 0 -> peak over ``warmup_frac * total`` steps, then linear decay to 0."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = warmup_frac * total
    if warm > 0 and step <= warm:
        return peak * step / warm
    if total == warm:
        return peak
    return peak * (total - step) / (total - warm)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2e-2
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, DiffValue], state: OptimizerState, lr: float | None = None) -> None:
    """One in-place AdamW update of ``params`` from their ``.grad`` accumulators.

    Decay is decoupled: ``p -= lr * wd * p`` is computed from the pre-step value
    and added independently of the adaptive gradient term.
    """
    lr = state.lr if lr is None else lr
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - lr * update - lr * state.weight_decay * p.data


def total_steps(n: int, batch: int, epochs: int) -> int:
    return epochs * math.ceil(n / batch)
