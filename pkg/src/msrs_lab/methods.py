"""Baseline sparse-training operations and mask bookkeeping shared by all methods.

Everything here is a pure function over numpy arrays. The training loops that
drive these live in :mod:`msrs_lab.train`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .mask import MsrsHyper
from .tensor import ShapeError

__all__ = [
    "METHODS",
    "SparseMethodConfig",
    "LayerShape",
    "round_half_up",
    "condense",
    "sparse_continue_step",
    "dense_masked_grads_step",
    "erk_densities",
    "erk_init",
    "erk_magnitude_init",
    "gmp_schedule",
    "magnitude_prune",
    "set_prune_grow",
    "rigl_prune_grow",
    "zeta_schedule",
]

METHODS = ("dense", "msrs", "gmp", "set", "rigl", "dense_masked_grads")


@dataclass
class SparseMethodConfig:
    method: str = "dense"
    target_sparsity: float = 0.4
    prune_grow_fraction: float = 0.3
    update_interval: int = 100
    dense_after: bool = True
    gmp_scope: str = "per-layer"
    gmp_start: float = 0.0
    gmp_end: float = 0.75
    msrs: MsrsHyper = field(default_factory=MsrsHyper)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError("target_sparsity must be in [0, 1)")
        if not 0.0 <= self.prune_grow_fraction <= 1.0:
            raise ValueError("prune_grow_fraction must be in [0, 1]")
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")
        if self.gmp_scope not in ("per-layer", "global"):
            raise ValueError("gmp_scope must be per-layer or global")
        if not 0.0 <= self.gmp_start <= self.gmp_end <= 1.0:
            raise ValueError("need 0 <= gmp_start <= gmp_end <= 1")


class LayerShape(NamedTuple):
    name: str
    fan_in: int
    fan_out: int

    @property
    def count(self) -> int:
        return self.fan_in * self.fan_out


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _check_pairs(a: dict, b: dict, what: str) -> None:
    for k, v in a.items():
        if np.shape(v) != np.shape(b[k]):
            raise ShapeError(f"{what}: {k} has shape {np.shape(v)} vs {np.shape(b[k])}")


def condense(thetas: dict, masks: dict) -> dict:
    """``theta_j * m`` per layer: the starting weights of the second phase."""
    _check_pairs(thetas, masks, "condense")
    return {k: thetas[k] * masks[k] for k in thetas}


def sparse_continue_step(grads: dict, masks: dict) -> dict:
    """Zero the gradient of every pruned weight."""
    _check_pairs(grads, masks, "sparse_continue_step")
    return {k: g * masks[k] if k in masks else g for k, g in grads.items()}


def dense_masked_grads_step(grads: dict, fixed_masks: dict) -> dict:
    """Gradients times a frozen mask; the weights themselves stay dense."""
    for k in fixed_masks:
        if np.shape(grads[k]) != np.shape(fixed_masks[k]):
            raise ShapeError(f"dense_masked_grads_step: {k} shape mismatch")
    return {k: g * fixed_masks[k] if k in fixed_masks else g for k, g in grads.items()}


# ---------------------------------------------------------------------------
# Erdos-Renyi-Kernel initialization
# ---------------------------------------------------------------------------


def erk_densities(layers: list[LayerShape], target_sparsity: float) -> tuple[dict, float]:
    """Per-layer densities and the scale ``c`` of the uncapped layers.

    Density is ``min(1, c (fan_in + fan_out) / (fan_in fan_out))``; layers that
    would exceed 1 are fixed dense and ``c`` is re-solved over the rest.
    """
    if not 0.0 <= target_sparsity < 1.0:
        raise ValueError("target_sparsity must be in [0, 1)")
    total = sum(l.count for l in layers)
    budget = (1.0 - target_sparsity) * total
    dense: set[str] = set()
    while True:
        free = [l for l in layers if l.name not in dense]
        remaining = budget - sum(l.count for l in layers if l.name in dense)
        if not free:
            if remaining > 1e-9 * total:
                raise ValueError("ERK target infeasible: every layer already dense")
            return {l.name: 1.0 for l in layers}, math.inf
        c = remaining / sum(l.fan_in + l.fan_out for l in free)
        over = [l.name for l in free if c * (l.fan_in + l.fan_out) / l.count > 1.0]
        if not over:
            break
        dense.update(over)
    dens = {l.name: 1.0 if l.name in dense else c * (l.fan_in + l.fan_out) / l.count
            for l in layers}
    return dens, c


def erk_init(layers: list[LayerShape], target_sparsity: float, rng_seed) -> dict:
    """Random binary masks with ERK layer densities."""
    dens, _ = erk_densities(layers, target_sparsity)
    rng = np.random.default_rng(rng_seed)
    masks = {}
    for l in layers:
        k = min(l.count, round_half_up(dens[l.name] * l.count))
        flat = np.zeros(l.count)
        flat[rng.choice(l.count, size=k, replace=False)] = 1.0
        masks[l.name] = flat.reshape(l.fan_in, l.fan_out)
    return masks


def erk_magnitude_init(weights: dict, target_sparsity: float) -> dict:
    """ERK layer densities, keeping the largest-magnitude weights of each layer.

    Used instead of :func:`erk_init` when the weights are already trained.
    """
    layers = [LayerShape(k, *w.shape) for k, w in weights.items()]
    dens, _ = erk_densities(layers, target_sparsity)
    masks = {}
    for l in layers:
        w = weights[l.name]
        k = min(l.count, round_half_up(dens[l.name] * l.count))
        flat = np.ones(l.count)
        flat[_smallest_k(w.reshape(-1), l.count - k)] = 0.0
        masks[l.name] = flat.reshape(w.shape)
    return masks


# ---------------------------------------------------------------------------
# Gradual magnitude pruning
# ---------------------------------------------------------------------------


def gmp_schedule(t: float, t0: float, span: float, s_initial: float, s_final: float) -> float:
    """Cubic sparsity ramp from ``s_initial`` at ``t0`` to ``s_final`` at ``t0 + span``."""
    if span <= 0:
        return s_final if t >= t0 else s_initial
    frac = min(max((t - t0) / span, 0.0), 1.0)
    return s_final + (s_initial - s_final) * (1.0 - frac) ** 3


def _smallest_k(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest ``|values|``, ties by ascending index."""
    return np.argsort(np.abs(values), kind="stable")[:k]


def magnitude_prune(weights: dict, target_sparsity: float, scope: str = "per-layer") -> dict:
    """Binary masks zeroing the ``round(s * count)`` smallest-magnitude weights."""
    if not 0.0 <= target_sparsity <= 1.0:
        raise ValueError("target_sparsity must be in [0, 1]")
    if scope == "per-layer":
        masks = {}
        for name, w in weights.items():
            flat = np.ones(w.size)
            flat[_smallest_k(w.reshape(-1), round_half_up(target_sparsity * w.size))] = 0.0
            masks[name] = flat.reshape(w.shape)
        return masks
    if scope != "global":
        raise ValueError("scope must be per-layer or global")
    names = list(weights)
    flat_w = np.concatenate([weights[n].reshape(-1) for n in names])
    flat = np.ones(flat_w.size)
    flat[_smallest_k(flat_w, round_half_up(target_sparsity * flat_w.size))] = 0.0
    masks, start = {}, 0
    for n in names:
        size = weights[n].size
        masks[n] = flat[start:start + size].reshape(weights[n].shape)
        start += size
    return masks


# ---------------------------------------------------------------------------
# Prune-and-grow
# ---------------------------------------------------------------------------


def _prune_active(w: np.ndarray, m: np.ndarray, zeta: float) -> tuple[np.ndarray, np.ndarray, int]:
    if not 0.0 <= zeta <= 1.0:
        raise ValueError("zeta must be in [0, 1]")
    if w.shape != m.shape:
        raise ShapeError(f"weights {w.shape} vs mask {m.shape}")
    flat_m = m.reshape(-1).copy()
    active = np.flatnonzero(flat_m)
    if active.size == 0:
        raise ValueError("mask has no active entries")
    k = round_half_up(zeta * active.size)
    pruned = active[_smallest_k(w.reshape(-1)[active], k)]
    # growth candidates exclude the positions pruned in this event
    candidates = np.flatnonzero(flat_m == 0)
    flat_m[pruned] = 0.0
    return flat_m, candidates, k


def set_prune_grow(weights: np.ndarray, mask: np.ndarray, zeta: float, rng) -> tuple[np.ndarray, int]:
    """Prune the smallest active weights and regrow as many at random.

    Returns the new mask and the growth shortfall (0 when the active count is
    conserved).
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    flat_m, candidates, k = _prune_active(weights, mask, zeta)
    grow = min(k, candidates.size)
    if grow:
        flat_m[rng.choice(candidates, size=grow, replace=False)] = 1.0
    return flat_m.reshape(mask.shape), k - grow


def rigl_prune_grow(weights: np.ndarray, dense_grads: np.ndarray, mask: np.ndarray,
                    zeta: float) -> tuple[np.ndarray, int]:
    """Prune as SET; regrow at the inactive positions of largest ``|grad|``."""
    if dense_grads.shape != mask.shape:
        raise ShapeError(f"grads {dense_grads.shape} vs mask {mask.shape}")
    flat_m, candidates, k = _prune_active(weights, mask, zeta)
    grow = min(k, candidates.size)
    if grow:
        score = -np.abs(dense_grads.reshape(-1)[candidates])
        flat_m[candidates[np.argsort(score, kind="stable")[:grow]]] = 1.0
    return flat_m.reshape(mask.shape), k - grow


def zeta_schedule(step: int, total_steps: int, zeta0: float) -> float:
    """Cosine decay of the prune/grow fraction to zero."""
    if total_steps <= 0:
        return zeta0
    frac = min(max(step / total_steps, 0.0), 1.0)
    return 0.5 * zeta0 * (1.0 + math.cos(math.pi * frac))
