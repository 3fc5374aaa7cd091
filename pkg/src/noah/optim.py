"""AdamW with decoupled weight decay, cosine LR schedule, and the shared
minibatch training loop.

The optimizer accepts per-step index regions so that a training step touches
only the parameter slices the sampled subnet actually used. Moments and step
counts live at the full bank shapes: slices share optimizer state the same
way they share weights, and bias correction is tracked per element because
different prefixes train at different rates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, backward


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; message names the step and sampled config."""


class ScheduleError(ValueError):
    pass


@dataclass
class OptimHyper:
    base_lr: float
    total_epochs: int
    weight_decay: float = 1e-3
    warmup_epochs: int = 10
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.base_lr <= 0 or self.total_epochs < 0 or self.batch_size <= 0:
            raise ScheduleError("base_lr and batch_size must be positive, epochs >= 0")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.total_epochs:
            raise ScheduleError(
                f"warmup_epochs {self.warmup_epochs} outside [0, {self.total_epochs}]"
            )
        if self.weight_decay < 0 or self.eps <= 0:
            raise ScheduleError("weight_decay must be >= 0 and eps > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ScheduleError("betas must be in [0, 1)")


def lr_at(step: int, total_steps: int, hyper: OptimHyper) -> float:
    """Linear ramp 0 -> base_lr over the warmup span, then a half-cosine decay
    down to a floor of 1e-6 * base_lr."""
    if not 0 <= step < total_steps:
        raise ScheduleError(f"step {step} outside [0, {total_steps})")
    warmup = int(round(total_steps * hyper.warmup_epochs / hyper.total_epochs))
    if step < warmup:
        return hyper.base_lr * step / warmup
    span = max(total_steps - warmup, 1)
    progress = (step - warmup) / span
    lr = hyper.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    return max(lr, 1e-6 * hyper.base_lr)


def default_decay_filter(name: str, t: Tensor) -> bool:
    """Decay weight matrices only: no biases, norms, or prompt-token banks."""
    return t.data.ndim >= 2 and not name.endswith(".P")


def full_region(t: Tensor) -> tuple:
    return tuple(slice(None) for _ in t.shape)


class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    ``step`` takes the regions active this step; anything outside them is
    left bit-for-bit untouched, including its moments.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        hyper: OptimHyper,
        decay_filter: Callable[[str, Tensor], bool] = default_decay_filter,
    ):
        self.params = dict(params)
        self.hyper = hyper
        self.decay = {name: decay_filter(name, t) for name, t in self.params.items()}
        self.m = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.t = {name: np.zeros(t.shape, np.int64) for name, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float, regions: dict[str, tuple] | None = None) -> None:
        hp = self.hyper
        if regions is None:
            regions = {name: full_region(t) for name, t in self.params.items()}
        for name, region in regions.items():
            p = self.params[name]
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            g = p.grad[region]
            self.t[name][region] += 1
            t = self.t[name][region]
            m = hp.beta1 * self.m[name][region] + (1.0 - hp.beta1) * g
            v = hp.beta2 * self.v[name][region] + (1.0 - hp.beta2) * g * g
            self.m[name][region] = m
            self.v[name][region] = v
            m_hat = m / (1.0 - hp.beta1**t)
            v_hat = v / (1.0 - hp.beta2**t)
            if hp.weight_decay != 0.0 and self.decay[name]:
                p.data[region] *= 1.0 - lr * hp.weight_decay
            p.data[region] -= lr * m_hat / (np.sqrt(v_hat) + hp.eps)


def batch_slices(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield start, min(start + batch_size, n)


def run_training(
    optimizer: AdamW,
    step_fn: Callable[[np.ndarray, int], tuple[Tensor, dict | None]],
    num_samples: int,
    hyper: OptimHyper,
    rng: np.random.Generator,
    extra_log: Callable[[int], dict] | None = None,
) -> list[dict]:
    """Epoch loop shared by supernet training, retraining and pretraining.

    ``step_fn(batch_indices, step)`` runs the forward pass and returns the
    scalar loss plus the optimizer regions for this step (None = all params).
    Returns one log record per epoch: {"epoch", "lr", "train_loss", ...}.
    """
    n = num_samples
    if n == 0:
        raise ValueError("empty training split")
    steps_per_epoch = math.ceil(n / hyper.batch_size)
    total_steps = steps_per_epoch * hyper.total_epochs
    log: list[dict] = []
    step = 0
    for epoch in range(hyper.total_epochs):
        order = rng.permutation(n)
        losses = []
        lr = 0.0
        for lo, hi in batch_slices(n, hyper.batch_size):
            lr = lr_at(step, total_steps, hyper)
            loss, regions = step_fn(order[lo:hi], step)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at step {step}")
            backward(loss)
            optimizer.step(lr, regions)
            optimizer.zero_grad()
            losses.append(value)
            step += 1
        record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses))}
        if extra_log is not None:
            record.update(extra_log(epoch))
        log.append(record)
    return log
