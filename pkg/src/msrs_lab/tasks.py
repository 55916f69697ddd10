"""Synthetic datasets, CSV I/O and residual-MLP construction."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .mask import MaskedParameter, MsrsHyper, init_phi

__all__ = [
    "Dataset",
    "ModelSpec",
    "Model",
    "gen_teacher_regression",
    "gen_two_spirals",
    "load_csv",
    "write_csv",
    "build_model",
    "pathological_model_spec",
    "teacher_spec",
]

ACTIVATIONS = ("tanh", "relu", "gelu")
INIT_SCHEMES = ("uniform-scaled", "normal-scaled")


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    kind: str = "regression"
    seed: int | None = None

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError("inputs must be a non-empty [N, d_in] array")
        if self.targets.shape[0] != self.inputs.shape[0]:
            raise ValueError("inputs and targets disagree on N")
        if self.kind not in ("regression", "classification"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]

    @property
    def d_out(self) -> int:
        if self.kind == "classification":
            return int(self.targets.max()) + 1
        return self.targets.shape[1]


@dataclass(frozen=True)
class ModelSpec:
    depth: int = 4
    width: int = 32
    activation: str = "tanh"
    residual: bool = True
    layerscale: bool = False
    layerscale_init: float = 1e-4
    normalization: bool = False
    d_in: int = 16
    d_out: int = 1
    init: str = "uniform-scaled"
    gain: float = 1.0

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be >= 1")
        if self.layerscale and not self.residual:
            raise ValueError("layerscale requires residual blocks")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {INIT_SCHEMES}")

    def to_dict(self) -> dict:
        return asdict(self)


def pathological_model_spec() -> ModelSpec:
    """Deep plain tanh MLP whose gradients vanish toward the input at init."""
    return ModelSpec(depth=16, width=32, activation="tanh", residual=False,
                     layerscale=False, normalization=False, d_in=16, d_out=1,
                     init="uniform-scaled", gain=1.0)


def teacher_spec() -> ModelSpec:
    """Default frozen teacher for the regression task."""
    return ModelSpec(depth=2, width=32, activation="tanh", residual=False,
                     d_in=16, d_out=1, gain=2.0)


@dataclass
class Model:
    """Parameters of a residual (or plain) MLP.

    Prunable linear weights live in ``masked`` as :class:`MaskedParameter`;
    biases, normalization and LayerScale parameters live in ``plain``.
    Weights are stored ``[fan_in, fan_out]`` and applied as ``x @ w``.
    """

    spec: ModelSpec
    masked: dict[str, MaskedParameter] = field(default_factory=dict)
    plain: dict[str, np.ndarray] = field(default_factory=dict)
    roles: dict[str, str] = field(default_factory=dict)

    @property
    def layer_names(self) -> list[str]:
        return list(self.masked)

    def block_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def probe_layers(self) -> list[str]:
        """First linear of every block, in depth order."""
        return [f"block{i:02d}.w1" for i in range(self.spec.depth)]

    def prunable_count(self) -> int:
        return sum(mp.theta.size for mp in self.masked.values())

    def thetas(self) -> dict[str, np.ndarray]:
        return {k: mp.theta for k, mp in self.masked.items()}

    def copy(self) -> "Model":
        return Model(
            spec=self.spec,
            masked={k: MaskedParameter(mp.theta.copy(), mp.phi.copy(), mp.l_fwd, mp.l_bwd, mp.name)
                    for k, mp in self.masked.items()},
            plain={k: v.copy() for k, v in self.plain.items()},
            roles=dict(self.roles),
        )

    def forward(self, x: T.Tensor, weights: dict[str, T.Tensor]) -> T.Tensor:
        """Run the network with the given tensors for every parameter."""
        s = self.spec
        h = T.add_bias(T.matmul(x, weights["in.w"]), weights["in.b"])
        for i in range(s.depth):
            p = f"block{i:02d}."
            if s.residual:
                ls = weights[p + "ls"] if s.layerscale else None
                if not s.normalization:
                    h = T.residual_block_forward(h, weights[p + "w1"], weights[p + "b1"],
                                                 weights[p + "w2"], weights[p + "b2"],
                                                 s.activation, ls)
                    continue
                # pre-norm: the trunk carries the un-normalized input
                u = T.layer_norm(h, weights[p + "ln.g"], weights[p + "ln.b"])
                z = T.activate(T.add_bias(T.matmul(u, weights[p + "w1"]), weights[p + "b1"]), s.activation)
                branch = T.add_bias(T.matmul(z, weights[p + "w2"]), weights[p + "b2"])
                if ls is not None:
                    branch = T.scale_columns(branch, ls)
                h = T.add(h, branch)
            else:
                z = T.add_bias(T.matmul(h, weights[p + "w1"]), weights[p + "b1"])
                if s.normalization:
                    z = T.layer_norm(z, weights[p + "ln.g"], weights[p + "ln.b"])
                h = T.activate(z, s.activation)
        return T.add_bias(T.matmul(h, weights["head.w"]), weights["head.b"])

    def predict(self, x: np.ndarray, effective: dict[str, np.ndarray] | None = None) -> np.ndarray:
        """Forward pass without gradient tracking."""
        weights = {k: T.Tensor(v) for k, v in self.plain.items()}
        eff = effective if effective is not None else self.thetas()
        weights.update({k: T.Tensor(v) for k, v in eff.items()})
        return self.forward(T.Tensor(x), weights).data


def _init_matrix(rng: np.random.Generator, fan_in: int, fan_out: int, spec: ModelSpec) -> np.ndarray:
    bound = spec.gain / np.sqrt(fan_in)
    if spec.init == "uniform-scaled":
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return rng.normal(0.0, bound, size=(fan_in, fan_out))


def _init_bias(rng: np.random.Generator, fan_in: int, fan_out: int, spec: ModelSpec) -> np.ndarray:
    bound = spec.gain / np.sqrt(fan_in)
    if spec.init == "uniform-scaled":
        return rng.uniform(-bound, bound, size=fan_out)
    return rng.normal(0.0, bound, size=fan_out)


def build_model(spec: ModelSpec, seed: int, hyper: MsrsHyper | None = None) -> Model:
    """Initialize a model; every linear weight gets logits from ``init_phi``.

    Non-residual blocks hold one linear (``w1``); residual blocks hold two.
    """
    hyper = hyper or MsrsHyper()
    rng = np.random.default_rng(seed)
    model = Model(spec=spec)

    def linear(name: str, fan_in: int, fan_out: int) -> None:
        theta = _init_matrix(rng, fan_in, fan_out, spec)
        model.masked[name] = MaskedParameter(theta, init_phi(theta, hyper),
                                             hyper.l_fwd, hyper.l_bwd, name=name)
        model.roles[name] = "weight"

    def plain(name: str, value: np.ndarray, role: str) -> None:
        model.plain[name] = value
        model.roles[name] = role

    def bias(name: str, fan_in: int, fan_out: int) -> None:
        plain(name, _init_bias(rng, fan_in, fan_out, spec), "bias")

    w = spec.width
    linear("in.w", spec.d_in, w)
    bias("in.b", spec.d_in, w)
    for i in range(spec.depth):
        p = f"block{i:02d}."
        if spec.normalization:
            plain(p + "ln.g", np.ones(w), "norm")
            plain(p + "ln.b", np.zeros(w), "norm")
        linear(p + "w1", w, w)
        bias(p + "b1", w, w)
        if spec.residual:
            linear(p + "w2", w, w)
            bias(p + "b2", w, w)
            if spec.layerscale:
                plain(p + "ls", np.full(w, spec.layerscale_init), "layerscale")
    linear("head.w", w, spec.d_out)
    bias("head.b", w, spec.d_out)
    return model


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def gen_teacher_regression(seed: int, n: int = 256, d_in: int = 16,
                           teacher: ModelSpec | None = None) -> Dataset:
    """Standard-normal inputs labelled by a frozen random teacher network.

    Targets are standardized per output column unless they are constant.
    """
    if n < 1:
        raise ValueError("N must be >= 1")
    teacher = teacher or teacher_spec()
    if teacher.d_in != d_in:
        teacher = replace(teacher, d_in=d_in)
    rng = np.random.default_rng([seed, 0])
    x = rng.standard_normal((n, d_in))
    net = build_model(teacher, seed=int(rng.integers(2**31)))
    y = net.predict(x)
    std = y.std(axis=0)
    y = np.where(std > 0, (y - y.mean(axis=0)) / np.where(std > 0, std, 1.0), y)
    return Dataset(inputs=x, targets=y, kind="regression", seed=seed)


def gen_two_spirals(seed: int, n: int = 256, noise: float = 0.0) -> Dataset:
    """Two interleaved spirals, ``n // 2`` points per class, standardized."""
    if n < 2 or n % 2:
        raise ValueError("N must be even and >= 2")
    rng = np.random.default_rng([seed, 1])
    half = n // 2
    t = np.sqrt(rng.uniform(0.0, 1.0, half)) * 3.0 * np.pi + 0.5
    arm = np.stack([t * np.cos(t), t * np.sin(t)], axis=1)
    pts = np.concatenate([arm, -arm]) + noise * rng.standard_normal((n, 2))
    labels = np.concatenate([np.zeros(half), np.ones(half)])
    order = rng.permutation(n)
    pts, labels = pts[order], labels[order]
    pts = (pts - pts.mean(axis=0)) / pts.std(axis=0)
    return Dataset(inputs=pts, targets=labels.astype(np.int64), kind="classification", seed=seed)


def write_csv(ds: Dataset, path) -> None:
    """Write ``inputs..., target`` rows with round-trip float formatting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for x, y in zip(ds.inputs, ds.targets):
            tail = [str(int(y))] if ds.kind == "classification" else [repr(float(v)) for v in np.atleast_1d(y)]
            w.writerow([repr(float(v)) for v in x] + tail)


def load_csv(path, d_in: int, target_kind: str = "regression", skip_header: bool = False) -> Dataset:
    """Parse a headerless numeric CSV whose last column is the target."""
    path = Path(path)
    rows_x, rows_y = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if skip_header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != d_in + 1:
                raise ValueError(f"{path}: row {lineno} has {len(row)} columns, expected {d_in + 1}")
            try:
                rows_x.append([float(c) for c in row[:d_in]])
                if target_kind == "classification":
                    label = float(row[d_in])
                    if label != int(label) or label < 0:
                        raise ValueError
                    rows_y.append(int(label))
                else:
                    rows_y.append([float(row[d_in])])
            except ValueError:
                raise ValueError(f"{path}: malformed value in row {lineno}") from None
    if not rows_x:
        raise ValueError(f"{path}: no rows")
    x = np.asarray(rows_x, dtype=np.float64)
    if target_kind == "classification":
        return Dataset(x, np.asarray(rows_y, dtype=np.int64), "classification")
    return Dataset(x, np.asarray(rows_y, dtype=np.float64), "regression")
