"""Adam-family optimizers, cosine learning-rate decay and cross-entropy.

Presets carry the two-stage training settings: AdamW (0.9, 0.95) at 1.5e-4
for autoencoder pretraining, Adam (0.5, 0.9) at 1e-4 for linear probing and
RAdam at 1e-3 for the classifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

KINDS = ("AdamW", "Adam", "RAdam")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "AdamW"
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {KINDS}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.kind == "Adam" and self.weight_decay != 0.0:
            raise ValueError("Adam carries no weight decay; use AdamW")

    def with_(self, **changes) -> "OptimizerConfig":
        return replace(self, **changes)


PRETRAIN_ADAMW = OptimizerConfig("AdamW", 1.5e-4, 0.9, 0.95, weight_decay=0.05)
LINEAR_PROBE_ADAM = OptimizerConfig("Adam", 1e-4, 0.5, 0.9)
CLASSIFIER_RADAM = OptimizerConfig("RAdam", 1e-3, 0.9, 0.999)


class Optimizer:
    """One optimizer over a fixed list of parameter tensors.

    ``rectify=False`` pins the RAdam rectifier to 1 and always takes the
    adaptive branch, which makes RAdam step-for-step identical to Adam.
    """

    def __init__(self, params: Sequence[Tensor], config: OptimizerConfig, rectify: bool = True):
        self.params = list(params)
        self.config = config
        self.rectify = rectify
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        ad.zero_grad(self.params)

    def step(self, lr: float | None = None, grads=None) -> None:
        cfg = self.config
        lr = cfg.base_lr if lr is None else lr
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.t += 1
        t = self.t
        b1, b2 = cfg.beta1, cfg.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        rect = None
        if cfg.kind == "RAdam" and self.rectify:
            rho_inf = 2.0 / (1.0 - b2) - 1.0
            rho_t = rho_inf - 2.0 * t * b2 ** t / bc2
            if rho_t > 5.0:
                rect = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                                 / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
            else:
                rect = 0.0  # variance not yet tractable: momentum-only step
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bc1
            if cfg.kind == "AdamW" and cfg.weight_decay:
                p.data -= lr * cfg.weight_decay * p.data
            if rect == 0.0:
                p.data -= lr * m_hat
                continue
            update = m_hat / (np.sqrt(v / bc2) + cfg.eps)
            if rect is not None:
                update = rect * update
            p.data -= lr * update


def step(optimizer: Optimizer, lr: float | None = None, grads=None) -> None:
    optimizer.step(lr=lr, grads=grads)


@dataclass(frozen=True)
class CosineSchedule:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be non-negative")
        if step >= self.total_steps:
            return self.min_lr
        if step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        progress = (step - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * progress))


def lr_at(schedule: CosineSchedule, step: int) -> float:
    return schedule.lr_at(step)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(float(np.sum([np.sum(g * g) for g in grads]))) if grads else 0.0
    if total > max_norm > 0:
        for g in grads:
            g *= max_norm / total
    return total


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is ``(M,)`` with an integer label, or ``(B, M)`` with ``B``
    labels.
    """
    logits = ad.as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels))
    single = logits.ndim == 1
    z = logits.data.reshape(-1, logits.shape[-1])
    m = z.shape[-1]
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} rows of logits")
    if not np.issubdtype(labels.dtype, np.integer) or np.any((labels < 0) | (labels >= m)):
        raise ValueError(f"labels must be integers in [0, {m}), got {labels.tolist()}")
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(z.shape[0])
    loss = -logp[rows, labels].mean()

    def grad_fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        d *= g / z.shape[0]
        return (d.reshape(m) if single else d,)

    return ad.make_op(np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn, "cross_entropy")
