"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the primitives a residual MLP needs are provided. Every op builds a new
node that remembers its inputs and a closure mapping the upstream gradient to
input gradients; :func:`backward` walks the recorded graph once in reverse
topological order.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Tensor",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "scale_columns",
    "matmul",
    "tanh",
    "relu",
    "gelu",
    "sigmoid",
    "stable_sigmoid",
    "layer_norm",
    "masked_weight",
    "total",
    "mse_loss",
    "cross_entropy_loss",
    "residual_block_forward",
    "record",
    "backward",
    "finite_difference_check",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Immutable value node in a computation graph.

    ``data`` is a float64 ndarray. ``op`` names the primitive that produced
    the node (``"leaf"`` for inputs and parameters).
    """

    __slots__ = ("data", "requires_grad", "op", "name", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=np.float64), shape))


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    arr.flags.writeable = False
    out.data = arr
    out.requires_grad = any(p.requires_grad for p in parents)
    out.op = op
    out.name = None
    out._parents = parents
    out._grad_fn = grad_fn if out.requires_grad else None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _node(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _node(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.data, b.data
    return _node(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast ``x[N, k] + b[k]``."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    return _node(x.data + b.data, "add_bias", (x, b), lambda g: (g, g.sum(axis=0)))


def scale_columns(x: Tensor, d: Tensor) -> Tensor:
    """Right-multiply rows of ``x[N, k]`` by ``diag(d)``; LayerScale."""
    if x.data.ndim != 2 or d.data.ndim != 1 or x.shape[1] != d.shape[0]:
        raise ShapeError(f"scale_columns: diagonal {d.shape} vs {x.shape}")
    xv, dv = x.data, d.data
    return _node(xv * dv, "scale_columns", (x, d), lambda g: (g * dv, (g * xv).sum(axis=0)))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), "relu", (a,), lambda g: (g * pos,))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _node(x * cdf, "gelu", (a,), lambda g: (g * (cdf + x * pdf),))


def stable_sigmoid(x) -> np.ndarray:
    """Overflow-free logistic function on raw arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = stable_sigmoid(a.data)
    return _node(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row mean/variance normalization with learnable gain and bias."""
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs {x.shape}")
    xv = x.data
    mu = xv.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(xv.var(axis=1, keepdims=True) + eps)
    xhat = (xv - mu) * inv
    gv = gain.data

    def grad_fn(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node(xhat * gv + bias.data, "layer_norm", (x, gain, bias), grad_fn)


def masked_weight(theta: Tensor, phi: Tensor, l_fwd: float, l_bwd: float,
                  chain_factor: bool = False) -> Tensor:
    """``theta * sigmoid(l_fwd * phi)`` with a two-temperature backward.

    The forward pass uses the sharp temperature. The gradient to ``phi`` uses
    ``s(1 - s)`` with ``s = sigmoid(l_bwd * phi)``; the extra factor ``l_bwd``
    of the ordinary chain rule is only included when ``chain_factor`` is set.
    """
    _same_shape("masked_weight", theta, phi)
    tv, pv = theta.data, phi.data
    m_fwd = stable_sigmoid(l_fwd * pv)
    s_bwd = stable_sigmoid(l_bwd * pv)
    dmask = s_bwd * (1.0 - s_bwd)
    if chain_factor:
        dmask = dmask * l_bwd
    return _node(tv * m_fwd, "masked_weight", (theta, phi),
                 lambda g: (g * m_fwd, g * tv * dmask))


# ---------------------------------------------------------------------------
# Linear algebra and reductions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    return _node(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    shape = a.shape
    return _node(np.asarray(a.data.sum()), "sum", (a,),
                 lambda g: (np.full(shape, float(g)),))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over the batch of the per-example squared error summed over outputs."""
    _same_shape("mse_loss", pred, target)
    diff = pred.data - target.data
    n = pred.shape[0] if pred.data.ndim else 1
    value = (diff * diff).sum() / n
    return _node(np.asarray(value), "mse", (pred, target),
                 lambda g: (float(g) * 2.0 * diff / n, -float(g) * 2.0 * diff / n))


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` are integer class indices."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_loss: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"class index out of range [0, {c})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    value = (logsumexp - z[np.arange(n), labels]).mean()
    probs = np.exp(z - logsumexp[:, None])
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    return _node(np.asarray(value), "cross_entropy", (logits,),
                 lambda g: (float(g) * (probs - onehot) / n,))


def residual_block_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                           activation: str = "tanh",
                           layerscale: Tensor | None = None) -> Tensor:
    """``x + D (act(x w1 + b1) w2 + b2)``, ``D = diag(layerscale)`` or identity.

    Rows of ``x`` are examples, so weights act from the right.
    """
    width = x.shape[1]
    if layerscale is not None and layerscale.shape != (width,):
        raise ShapeError(f"layerscale must have length {width}, got {layerscale.shape}")
    branch = add_bias(matmul(activate(add_bias(matmul(x, w1), b1), activation), w2), b2)
    if branch.shape != x.shape:
        raise ShapeError(f"residual branch {branch.shape} vs trunk {x.shape}")
    if layerscale is not None:
        branch = scale_columns(branch, layerscale)
    return add(x, branch)


_ACTIVATIONS = {"tanh": tanh, "relu": relu, "gelu": gelu, "sigmoid": sigmoid}


def activate(x: Tensor, name: str) -> Tensor:
    try:
        return _ACTIVATIONS[name](x)
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------


def record(root: Tensor) -> list[Tensor]:
    """Topologically ordered nodes feeding ``root`` (inputs before consumers)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None,
             upstream: float = 1.0) -> dict:
    """Gradients of a scalar ``loss``.

    With ``params`` given as a name->Tensor mapping the result is keyed by
    name; as an iterable of tensors it is keyed by ``id``. Parameters the loss
    does not reach get zero gradients. Without ``params`` every leaf that
    requires grad is returned, keyed by ``id``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, float(upstream))}
    order = record(loss)
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is None:
        return {id(n): grads.get(id(n), np.zeros(n.shape))
                for n in order if n.op == "leaf" and n.requires_grad}
    if isinstance(params, Mapping):
        return {k: np.asarray(grads.get(id(t), np.zeros(t.shape))) for k, t in params.items()}
    return {id(t): np.asarray(grads.get(id(t), np.zeros(t.shape))) for t in params}


def finite_difference_check(f: Callable[[np.ndarray], float], x, analytic,
                            h: float = 1e-5) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    Error per coordinate is ``|a - fd| / (|a| + 1e-12)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        fd = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - fd) / (abs(a) + 1e-12))
    return worst
