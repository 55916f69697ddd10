"""AdamW, warmup+cosine schedule and global-norm clipping on numpy arrays."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NumericalAbort",
    "OptimizerConfig",
    "Moments",
    "adamw_step",
    "sgd_step",
    "lr_schedule",
    "clip_global_norm",
    "global_norm",
]


class NumericalAbort(RuntimeError):
    """A loss or gradient became non-finite; ``snapshot`` holds diagnostics."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    peak_lr_theta: float = 1e-3
    peak_lr_phi: float = 1e-3
    clip_norm: float = 5.0
    warmup_epochs: int = 1
    total_epochs: int = 20
    batch_size: int = 32
    optimizer: str = "adamw"

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError("optimizer must be adamw or sgd")
        if self.total_epochs < 1 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ValueError("epochs and batch size must be positive")


@dataclass
class Moments:
    """First/second moment accumulators for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, a: np.ndarray) -> "Moments":
        return cls(np.zeros_like(a, dtype=np.float64), np.zeros_like(a, dtype=np.float64), 0)


def adamw_step(param: np.ndarray, grad: np.ndarray, state: Moments, lr: float,
               betas: tuple[float, float] = (0.9, 0.98), weight_decay: float = 0.0,
               eps: float = 1e-8, update_mask: np.ndarray | None = None) -> np.ndarray:
    """One bias-corrected AdamW update with decoupled weight decay.

    ``update_mask`` zeroes the whole update (decay included) where it is 0.
    Mutates ``state`` and returns the new parameter array.
    """
    if not np.all(np.isfinite(grad)):
        raise NumericalAbort("non-finite gradient in optimizer step")
    b1, b2 = betas
    state.t += 1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    if weight_decay:
        update = update + lr * weight_decay * param
    if update_mask is not None:
        update = update * update_mask
    return param - update


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float,
             update_mask: np.ndarray | None = None) -> np.ndarray:
    if not np.all(np.isfinite(grad)):
        raise NumericalAbort("non-finite gradient in optimizer step")
    update = lr * grad
    if update_mask is not None:
        update = update * update_mask
    return param - update


def lr_schedule(step: int, warmup_steps: int, total_steps: int, peak: float) -> float:
    """Linear warmup to ``peak`` then half-cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak
    frac = min(max((step - warmup_steps) / (total_steps - warmup_steps), 0.0), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def global_norm(grads) -> float:
    values = grads.values() if isinstance(grads, dict) else grads
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in values))


def clip_global_norm(grads: dict, clip_norm: float) -> tuple[dict, float]:
    """Scale every gradient by ``clip_norm / norm`` when the joint norm exceeds it."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be > 0")
    norm = global_norm(grads)
    if norm > clip_norm:
        factor = clip_norm / norm
        return {k: g * factor for k, g in grads.items()}, norm
    return dict(grads), norm
