"""Mask-logit machinery: initialization, relaxation, two-temperature gradients,
linear sparsity penalty, binarization and mask-change metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterable

import numpy as np

from .tensor import ShapeError, stable_sigmoid

__all__ = [
    "MsrsHyper",
    "MaskedParameter",
    "init_phi",
    "relaxed_mask",
    "effective_weight",
    "masked_backward",
    "penalty_value",
    "penalty_grad",
    "apply_penalty",
    "binarize",
    "sparsity",
    "mask_delta",
    "sign_threshold",
]


@dataclass
class MsrsHyper:
    """Mask hyperparameters. Defaults are the published large-scale values."""

    mu: float = 1e-3
    rho: float = 5e-4
    varsigma: float = 1e-8
    lam: float = 2e-10
    epsilon: float = 0.01
    l_fwd: float = 1e5
    l_bwd: float = 1.0
    max_joint_epochs: int = 10
    chain_factor: bool = False

    def __post_init__(self):
        if not self.varsigma > 0:
            raise ValueError("varsigma must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not (self.l_fwd >= self.l_bwd > 0):
            raise ValueError("temperatures must satisfy l_fwd >= l_bwd > 0")
        if self.max_joint_epochs < 1:
            raise ValueError("max_joint_epochs must be >= 1")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class MaskedParameter:
    """A prunable weight matrix with its mask logits and temperatures."""

    theta: np.ndarray
    phi: np.ndarray
    l_fwd: float = 1e5
    l_bwd: float = 1.0
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.theta.shape != self.phi.shape:
            raise ShapeError(f"theta {self.theta.shape} and phi {self.phi.shape} differ")
        if not (self.l_fwd >= self.l_bwd > 0):
            raise ValueError("temperatures must satisfy l_fwd >= l_bwd > 0")

    @property
    def shape(self):
        return self.theta.shape


def init_phi(theta0, h: MsrsHyper) -> np.ndarray:
    """``(ln(|theta0| + varsigma) / 2 + 1) * rho + mu`` elementwise."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    return (np.log(np.abs(theta0) + h.varsigma) / 2.0 + 1.0) * h.rho + h.mu


def sign_threshold(h: MsrsHyper) -> float:
    """Smallest ``|theta0|`` whose initial logit is non-negative."""
    return math.exp(2.0 * (-h.mu / h.rho - 1.0)) - h.varsigma


def relaxed_mask(phi, l: float) -> np.ndarray:
    if not l > 0:
        raise ValueError("temperature must be positive")
    return stable_sigmoid(l * np.asarray(phi, dtype=np.float64))


def effective_weight(mp: MaskedParameter) -> np.ndarray:
    return mp.theta * relaxed_mask(mp.phi, mp.l_fwd)


def masked_backward(upstream, mp: MaskedParameter, chain_factor: bool = False):
    """Gradients of ``theta`` and ``phi`` from ``dL/dw_eff``.

    ``grad_theta = g * sigmoid(l_fwd phi)``;
    ``grad_phi = g * theta * s (1 - s)`` with ``s = sigmoid(l_bwd phi)``.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != mp.shape:
        g = np.broadcast_to(g, mp.shape)
    s = relaxed_mask(mp.phi, mp.l_bwd)
    dmask = s * (1.0 - s)
    if chain_factor:
        dmask = dmask * mp.l_bwd
    return g * relaxed_mask(mp.phi, mp.l_fwd), g * mp.theta * dmask


def penalty_value(phis: Iterable[np.ndarray], lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return lam * float(sum(np.asarray(p, dtype=np.float64).sum() for p in phis))


def penalty_grad(phi, lam: float) -> np.ndarray:
    """Constant per-entry gradient of the linear penalty."""
    return np.full(np.shape(phi), float(lam))


def apply_penalty(mp: MaskedParameter, lam: float) -> None:
    """Decrement every logit by ``lam``, outside any optimizer."""
    if lam:
        mp.phi = mp.phi - lam


def binarize(phi) -> np.ndarray:
    """1 where ``phi >= 0`` (zero maps to 1), else 0."""
    return (np.asarray(phi) >= 0).astype(np.float64)


def _as_masks(mask) -> list[np.ndarray]:
    if isinstance(mask, np.ndarray):
        return [mask]
    if isinstance(mask, dict):
        return [np.asarray(m) for m in mask.values()]
    if isinstance(mask, (list, tuple)) and mask and np.ndim(mask[0]) == 0:
        return [np.asarray(mask, dtype=np.float64)]
    return [np.asarray(m) for m in mask]


def sparsity(mask) -> float:
    """Fraction of zero entries, pooled over a collection of masks."""
    masks = _as_masks(mask)
    count = sum(m.size for m in masks)
    if count == 0:
        raise ValueError("sparsity of an empty mask collection")
    zeros = sum(int(m.size - np.count_nonzero(m)) for m in masks)
    return zeros / count


def mask_delta(prev, cur) -> tuple[float, int]:
    """``(|sparsity(cur) - sparsity(prev)|, hamming distance)``."""
    p, c = _as_masks(prev), _as_masks(cur)
    if len(p) != len(c) or any(a.shape != b.shape for a, b in zip(p, c)):
        raise ShapeError("mask_delta: mask shapes differ")
    hamming = sum(int(np.count_nonzero(a != b)) for a, b in zip(p, c))
    return abs(sparsity(c) - sparsity(p)), hamming


def layer_sparsities(masks: dict) -> dict:
    return {k: sparsity(v) for k, v in masks.items()}

