"""Finite-difference oracle suite over every autodiff primitive.

Each registered op draws seeded random inputs, reduces its output to a scalar
through a fixed random projection and compares the reverse-mode gradient of
every input with central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .mask import MaskedParameter, masked_backward
from .tasks import ModelSpec, build_model

__all__ = ["OPS", "GradcheckResult", "run_gradcheck", "TOLERANCE"]

TOLERANCE = 1e-5
H = 1e-5

# A case builder returns (forward, inputs). ``forward`` maps input Tensors to an
# output Tensor; ``inputs`` are the arrays to differentiate.
CaseBuilder = Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]


def _mat(rng, *shape):
    return rng.standard_normal(shape)


def _away_from_zero(rng, *shape, lo=0.1, hi=2.0):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _elementwise(fn, sampler=_mat):
    def build(rng):
        return fn, [sampler(rng, 3, 4)]
    return build


def _binary(fn):
    def build(rng):
        return fn, [_mat(rng, 3, 4), _mat(rng, 3, 4)]
    return build


def _gelu_inputs(rng, *shape):
    # the derivative vanishes near -0.75; keep clear of it
    return rng.uniform(-0.5, 2.5, shape)


def _masked(l: float):
    def build(rng):
        fn = lambda th, ph: T.masked_weight(th, ph, l, l, chain_factor=True)
        return fn, [_mat(rng, 3, 4), rng.uniform(-0.3, 0.3, (3, 4))]
    return build


def _residual(layerscale: bool, activation: str = "tanh"):
    def build(rng):
        w = 4
        arrays = [_mat(rng, 5, w), _mat(rng, w, w) * 0.5, _mat(rng, w) * 0.1,
                  _mat(rng, w, w) * 0.5, _mat(rng, w) * 0.1]
        if layerscale:
            arrays.append(rng.uniform(0.2, 1.0, w))
            return (lambda x, w1, b1, w2, b2, d:
                    T.residual_block_forward(x, w1, b1, w2, b2, activation, d)), arrays
        return (lambda x, w1, b1, w2, b2:
                T.residual_block_forward(x, w1, b1, w2, b2, activation)), arrays
    return build


def _mse(rng):
    target = _mat(rng, 3, 2)
    return (lambda p: T.mse_loss(p, T.Tensor(target))), [_mat(rng, 3, 2)]


def _xent(rng):
    labels = rng.integers(0, 4, size=5)
    return (lambda z: T.cross_entropy_loss(z, labels)), [_mat(rng, 5, 4)]


def _layer_norm(rng):
    return T.layer_norm, [_mat(rng, 3, 5), rng.uniform(0.5, 1.5, 5), _mat(rng, 5)]


def _model_loss(rng):
    spec = ModelSpec(depth=2, width=6, d_in=3, d_out=2, residual=True)
    model = build_model(spec, int(rng.integers(2**31)))
    x, y = _mat(rng, 4, 3), _mat(rng, 4, 2)
    names = list(model.plain) + list(model.masked)
    arrays = [model.plain[n] for n in model.plain] + [mp.theta for mp in model.masked.values()]

    def fn(*tensors):
        return T.mse_loss(model.forward(T.Tensor(x), dict(zip(names, tensors))), T.Tensor(y))
    return fn, arrays


OPS: dict[str, CaseBuilder] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "scale": _elementwise(lambda a: T.scale(a, -1.7)),
    "add_bias": lambda rng: (T.add_bias, [_mat(rng, 3, 4), _mat(rng, 4)]),
    "scale_columns": lambda rng: (T.scale_columns, [_mat(rng, 3, 4), _mat(rng, 4)]),
    "tanh": _elementwise(T.tanh, lambda rng, *s: rng.uniform(-2.0, 2.0, s)),
    "relu": _elementwise(T.relu, _away_from_zero),
    "gelu": _elementwise(T.gelu, _gelu_inputs),
    "sigmoid": _elementwise(T.sigmoid),
    "layer_norm": _layer_norm,
    "matmul": lambda rng: (T.matmul, [_mat(rng, 3, 4), _mat(rng, 4, 2)]),
    "sum": _elementwise(T.total),
    "mse_loss": _mse,
    "cross_entropy_loss": _xent,
    "masked_weight[l=1]": _masked(1.0),
    "masked_weight[l=10]": _masked(10.0),
    "residual_block": _residual(False),
    "residual_block[layerscale]": _residual(True),
    "residual_block[gelu]": _residual(False, "gelu"),
    "model_loss[2-block]": _model_loss,
}


def _masked_backward_case(l: float):
    """``masked_backward`` checked against differences of ``sum(U * theta * sigmoid(l phi))``."""
    def run(rng, perturb):
        theta, phi = _mat(rng, 3, 4), rng.uniform(-0.3, 0.3, (3, 4))
        up = _mat(rng, 3, 4)
        mp = MaskedParameter(theta, phi, l, l)
        gt, gp = masked_backward(up, mp, chain_factor=True)
        if perturb:
            gt, gp = gt * (1 + 1e-3), gp * (1 + 1e-3)
        f_t = lambda t: float(np.sum(up * t * T.stable_sigmoid(l * phi)))
        f_p = lambda p: float(np.sum(up * theta * T.stable_sigmoid(l * p)))
        return max(T.finite_difference_check(f_t, theta, gt, H),
                   T.finite_difference_check(f_p, phi, gp, H))
    return run


_DIRECT = {
    "masked_backward[l=1]": _masked_backward_case(1.0),
    "masked_backward[l=10]": _masked_backward_case(10.0),
}


def op_names() -> list[str]:
    return list(OPS) + list(_DIRECT)


def _check_case(build: CaseBuilder, rng, perturb: bool) -> float:
    fn, arrays = build(rng)
    out_shape = fn(*[T.Tensor(a) for a in arrays]).shape
    proj = rng.uniform(0.5, 1.5, out_shape) * rng.choice([-1.0, 1.0], out_shape)

    def scalar(tensors):
        out = fn(*tensors)
        return out if out.size == 1 and out.data.ndim == 0 else T.total(T.mul(out, T.Tensor(proj)))

    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    grads = T.backward(scalar(leaves), leaves)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = grads[id(leaf)] * ((1 + 1e-3) if perturb else 1.0)

        def f(x, i=i):
            vals = [T.Tensor(a) for a in arrays]
            vals[i] = T.Tensor(x)
            return float(scalar(vals).data)

        worst = max(worst, T.finite_difference_check(f, arrays[i], analytic, H))
    return worst


@dataclass
class GradcheckResult:
    op: str
    max_rel_err: float
    cases: int

    @property
    def ok(self) -> bool:
        return bool(self.max_rel_err < TOLERANCE)


def run_gradcheck(seed: int = 0, cases: int = 100, perturb: str | None = None,
                  ops: list[str] | None = None) -> list[GradcheckResult]:
    """Check every op over ``cases`` seeded draws.

    ``perturb`` names an op whose analytic gradient is scaled by ``1 + 1e-3``;
    it exists so the failure path can be exercised.
    """
    names = ops or op_names()
    unknown = [n for n in names if n not in OPS and n not in _DIRECT]
    if perturb is not None and perturb not in OPS and perturb not in _DIRECT:
        unknown.append(perturb)
    if unknown:
        raise KeyError(f"unknown op(s): {', '.join(unknown)}")
    results = []
    for k, name in enumerate(op_names()):
        if name not in names:
            continue
        worst = 0.0
        for c in range(cases):
            rng = np.random.default_rng([seed, k, c])
            if name in _DIRECT:
                err = _DIRECT[name](rng, perturb == name)
            else:
                err = _check_case(OPS[name], rng, perturb == name)
            worst = max(worst, err)
        results.append(GradcheckResult(name, worst, cases))
    return results
