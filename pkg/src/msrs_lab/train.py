"""Training loops for every method, two-phase mask training, telemetry and sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .mask import apply_penalty, binarize, init_phi, mask_delta, sparsity
from .methods import (
    LayerShape,
    SparseMethodConfig,
    condense,
    dense_masked_grads_step,
    erk_init,
    erk_magnitude_init,
    gmp_schedule,
    magnitude_prune,
    rigl_prune_grow,
    round_half_up,
    set_prune_grow,
    sparse_continue_step,
    zeta_schedule,
)
from .optim import (
    Moments,
    NumericalAbort,
    OptimizerConfig,
    adamw_step,
    clip_global_norm,
    lr_schedule,
    sgd_step,
)
from .tasks import (
    Dataset,
    Model,
    ModelSpec,
    build_model,
    gen_teacher_regression,
    gen_two_spirals,
    load_csv,
    teacher_spec,
)

log = logging.getLogger(__name__)

__all__ = [
    "TaskConfig",
    "RunResult",
    "Trainer",
    "make_dataset",
    "run_experiment",
    "msrs_joint_phase",
    "grad_norm_probe",
    "sparsity_report",
    "lambda_sweep",
    "layer_inventory",
    "RECORD_FIELDS",
]

RECORD_FIELDS = (
    "run_id", "phase", "epoch", "step", "loss", "global_sparsity", "per_layer_sparsity",
    "mask_sparsity_diff", "mask_hamming_delta", "per_layer_grad_l2", "lr_theta", "lr_phi",
    "lambda",
)

# stream ids for independent seeded generators
_DATA_ORDER, _SET_GROWTH, _ERK = 11, 12, 13


@dataclass
class TaskConfig:
    name: str = "teacher"
    seed: int = 7
    n: int = 256
    d_in: int = 16
    noise: float = 0.0
    teacher_depth: int = 2
    teacher_width: int = 32
    teacher_gain: float = 2.0
    path: str = ""
    target_kind: str = "regression"
    skip_header: bool = False

    def __post_init__(self):
        if self.name not in ("teacher", "spirals", "csv"):
            raise ValueError("task name must be teacher, spirals or csv")


def make_dataset(tc: TaskConfig) -> Dataset:
    if tc.name == "teacher":
        teacher = replace(teacher_spec(), depth=tc.teacher_depth, width=tc.teacher_width,
                          gain=tc.teacher_gain, d_in=tc.d_in)
        return gen_teacher_regression(tc.seed, tc.n, tc.d_in, teacher)
    if tc.name == "spirals":
        return gen_two_spirals(tc.seed, tc.n, tc.noise)
    return load_csv(tc.path, tc.d_in, tc.target_kind, tc.skip_header)


def layer_inventory(model: Model) -> list[LayerShape]:
    return [LayerShape(k, mp.shape[0], mp.shape[1]) for k, mp in model.masked.items()]


def grad_norm_probe(grads: dict, layers=None) -> dict:
    """L2 norm of each selected layer's gradient."""
    names = list(grads) if layers is None else list(layers)
    return {k: float(np.sqrt(np.sum(np.square(grads[k])))) for k in names}


def sparsity_report(masks: dict, block_of: Callable[[str], str] | None = None) -> dict:
    """Per-layer, per-block (count-pooled) and global sparsity of prunable layers."""
    block_of = block_of or (lambda n: n.split(".", 1)[0])
    layers = {k: sparsity(m) for k, m in masks.items()}
    blocks: dict[str, list] = {}
    for k, m in masks.items():
        blocks.setdefault(block_of(k), []).append(m)
    return {
        "layers": layers,
        "blocks": {b: sparsity(ms) for b, ms in blocks.items()},
        "global": sparsity(list(masks.values())),
        "counts": {k: int(m.size) for k, m in masks.items()},
    }


@dataclass
class RunResult:
    run_id: str
    records: list[dict]
    model: Model
    masks: dict | None
    epochs_joint: int | None = None
    stop_reason: str | None = None
    moments: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    lr_trace: list = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.records[0]["loss"]

    @property
    def final_loss(self) -> float:
        return self.records[-1]["loss"]

    @property
    def final_sparsity(self) -> float:
        return self.records[-1]["global_sparsity"]


class Trainer:
    """Owns one model, its optimizer state and the metric stream of one run."""

    def __init__(self, model: Model, data: Dataset, method: SparseMethodConfig,
                 optim: OptimizerConfig, seed: int, run_id: str = "run",
                 log_interval: int = 10, on_record: Callable[[dict], None] | None = None):
        self.model = model
        self.data = data
        self.method = method
        self.optim = optim
        self.seed = seed
        self.run_id = run_id
        self.log_interval = max(1, int(log_interval))
        self.on_record = on_record
        self.records: list[dict] = []
        self.epoch = 0
        self.step = 0
        self.phase = "train"
        self.mode = "dense"
        self.forward_mask = False
        self.grad_mask = False
        self.masks: dict | None = None
        self.moments: dict[str, Moments] = {}
        self.phase_step = 0
        self.phase_total = 1
        self.phase_warmup = 0
        self.lr_theta = 0.0
        self.lr_phi: float | None = None
        self._last_mask_for_delta = None
        self._pending_delta: tuple[float, int] | None = None
        self._last_grad_norms: dict | None = None
        # (phase, phase_step, lr_theta, lr_phi) for every update actually taken
        self.lr_trace: list[tuple] = []
        self.batch = min(optim.batch_size, data.n)
        self.steps_per_epoch = math.ceil(data.n / self.batch)

    # -- forward / backward -------------------------------------------------

    def _loss_tensor(self, pred: T.Tensor, idx) -> T.Tensor:
        if self.data.kind == "classification":
            return T.cross_entropy_loss(pred, self.data.targets[idx])
        return T.mse_loss(pred, T.Tensor(self.data.targets[idx]))

    def effective_weights(self) -> dict:
        if self.mode == "relaxed":
            return {k: mp.theta * T.stable_sigmoid(mp.l_fwd * mp.phi) for k, mp in self.model.masked.items()}
        if self.forward_mask:
            return {k: mp.theta * self.masks[k] for k, mp in self.model.masked.items()}
        return self.model.thetas()

    def full_loss(self) -> float:
        idx = np.arange(self.data.n)
        pred = T.Tensor(self.model.predict(self.data.inputs, self.effective_weights()))
        return float(self._loss_tensor(pred, idx).data)

    def forward_backward(self, idx):
        """Loss and raw gradients on a batch.

        Returns ``(loss, theta_grads, plain_grads, phi_grads, weight_grads)``
        where ``weight_grads`` are taken w.r.t. the effective weights.
        """
        model = self.model
        chain = self.method.msrs.chain_factor
        leaves: dict[str, T.Tensor] = {}
        weights: dict[str, T.Tensor] = {}
        for k, v in model.plain.items():
            weights[k] = leaves["p:" + k] = T.Tensor(v, requires_grad=True)
        for k, mp in model.masked.items():
            if self.mode == "relaxed":
                th = leaves["t:" + k] = T.Tensor(mp.theta, requires_grad=True)
                ph = leaves["f:" + k] = T.Tensor(mp.phi, requires_grad=True)
                weights[k] = T.masked_weight(th, ph, mp.l_fwd, mp.l_bwd, chain)
            else:
                w = mp.theta * self.masks[k] if self.forward_mask else mp.theta
                weights[k] = leaves["w:" + k] = T.Tensor(w, requires_grad=True)
        pred = model.forward(T.Tensor(self.data.inputs[idx]), weights)
        loss = self._loss_tensor(pred, idx)
        lv = float(loss.data)
        if not math.isfinite(lv):
            raise NumericalAbort(f"non-finite loss at step {self.step}",
                                 {"step": self.step, "epoch": self.epoch, "phase": self.phase})
        g = T.backward(loss, leaves)
        plain = {k: g["p:" + k] for k in model.plain}
        if self.mode == "relaxed":
            theta = {k: g["t:" + k] for k in model.masked}
            phi = {k: g["f:" + k] for k in model.masked}
            return lv, theta, plain, phi, None
        wgrads = {k: g["w:" + k] for k in model.masked}
        theta = dict(wgrads)
        if self.forward_mask:
            # chain rule through w = theta * m
            theta = {k: wgrads[k] * self.masks[k] for k in theta}
        if self.grad_mask:
            if self.method.method == "dense_masked_grads":
                theta = dense_masked_grads_step(theta, self.masks)
            else:
                theta = sparse_continue_step(theta, self.masks)
        return lv, theta, plain, None, wgrads

    # -- optimizer ----------------------------------------------------------

    def reset_optimizer(self, total_epochs: int) -> None:
        self.moments = {}
        self.phase_step = 0
        self.phase_total = total_epochs * self.steps_per_epoch
        self.phase_warmup = self.optim.warmup_epochs * self.steps_per_epoch

    def _moment(self, key: str, like: np.ndarray) -> Moments:
        if key not in self.moments:
            self.moments[key] = Moments.zeros_like(like)
        return self.moments[key]

    def _update(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float,
                update_mask=None, decay: bool = True) -> np.ndarray:
        o = self.optim
        if o.optimizer == "sgd":
            return sgd_step(param, grad, lr, update_mask)
        return adamw_step(param, grad, self._moment(key, param), lr, (o.beta1, o.beta2),
                          o.weight_decay if decay else 0.0, o.eps, update_mask)

    def train_step(self, idx) -> tuple[float, dict | None]:
        o = self.optim
        lv, gtheta, gplain, gphi, wgrads = self.forward_backward(idx)
        self._last_grad_norms = grad_norm_probe(gtheta)
        grads = {"t:" + k: v for k, v in gtheta.items()}
        grads.update({"p:" + k: v for k, v in gplain.items()})
        if gphi is not None:
            grads.update({"f:" + k: v for k, v in gphi.items()})
        grads, _ = clip_global_norm(grads, o.clip_norm)
        self.lr_theta = lr_schedule(self.phase_step, self.phase_warmup, self.phase_total, o.peak_lr_theta)
        model = self.model
        for k, mp in model.masked.items():
            um = self.masks[k] if self.grad_mask else None
            mp.theta = self._update("t:" + k, mp.theta, grads["t:" + k], self.lr_theta, um)
        for k in model.plain:
            model.plain[k] = self._update("p:" + k, model.plain[k], grads["p:" + k], self.lr_theta)
        if gphi is not None:
            self.lr_phi = lr_schedule(self.phase_step, self.phase_warmup, self.phase_total, o.peak_lr_phi)
            lam = self.method.msrs.lam
            for k, mp in model.masked.items():
                mp.phi = self._update("f:" + k, mp.phi, grads["f:" + k], self.lr_phi, decay=False)
                apply_penalty(mp, lam)
        self.lr_trace.append((self.phase, self.phase_step, self.lr_theta,
                              self.lr_phi if gphi is not None else None))
        self.phase_step += 1
        self.step += 1
        return lv, wgrads

    # -- telemetry ----------------------------------------------------------

    def current_masks(self) -> dict | None:
        if self.mode == "relaxed":
            return {k: binarize(mp.phi) for k, mp in self.model.masked.items()}
        if self.forward_mask:
            return self.masks
        return None

    def _sparsities(self) -> tuple[float, dict]:
        masks = self.current_masks()
        if masks is None:
            return 0.0, {k: 0.0 for k in self.model.masked}
        rep = sparsity_report(masks)
        return rep["global"], rep["layers"]

    def emit(self, delta: tuple[float, int] | None = None) -> dict:
        gs, layers = self._sparsities()
        lam = self.method.msrs.lam if self.method.method == "msrs" or self.phase == "joint" else None
        rec = {
            "run_id": self.run_id,
            "phase": self.phase,
            "epoch": self.epoch,
            "step": self.step,
            "loss": self.full_loss(),
            "global_sparsity": gs,
            "per_layer_sparsity": layers,
            "mask_sparsity_diff": None if delta is None else float(delta[0]),
            "mask_hamming_delta": None if delta is None else int(delta[1]),
            "per_layer_grad_l2": self._last_grad_norms,
            "lr_theta": self.lr_theta,
            "lr_phi": self.lr_phi if self.phase == "joint" else None,
            "lambda": lam,
        }
        self.records.append(rec)
        if self.on_record is not None:
            self.on_record(rec)
        return rec

    def emit_initial(self) -> dict:
        """Record at step 0 with full-batch gradient norms and no update."""
        _, gtheta, *_ = self.forward_backward(np.arange(self.data.n))
        self._last_grad_norms = grad_norm_probe(gtheta)
        rec = self.emit()
        self._last_grad_norms = None
        return rec

    # -- epochs -------------------------------------------------------------

    def batches(self):
        order = np.random.default_rng([self.seed, _DATA_ORDER, self.epoch]).permutation(self.data.n)
        for start in range(0, self.data.n, self.batch):
            yield order[start:start + self.batch]

    def run_epoch(self, on_step: Callable[[dict | None], None] | None = None,
                  epoch_end_delta: Callable[[], tuple[float, int] | None] | None = None) -> None:
        self.epoch += 1
        batches = list(self.batches())
        for i, idx in enumerate(batches):
            _, wgrads = self.train_step(idx)
            if on_step is not None:
                on_step(wgrads)
            last = i == len(batches) - 1
            if last:
                self.emit(epoch_end_delta() if epoch_end_delta else None)
            elif self.step % self.log_interval == 0:
                self.emit()

    def configure(self, phase: str, mode: str, masks: dict | None = None,
                  forward_mask: bool = False, grad_mask: bool = False) -> None:
        self.phase, self.mode, self.masks = phase, mode, masks
        self.forward_mask, self.grad_mask = forward_mask, grad_mask
        if mode != "relaxed":
            self.lr_phi = None


def msrs_joint_phase(tr: Trainer) -> tuple[dict, dict, int, str]:
    """Jointly train weights and mask logits until the binary mask settles.

    Masks are compared at epoch ends; the phase stops once the global
    sparsity of two consecutive end-of-epoch masks differs by less than
    epsilon, or after ``max_joint_epochs``. Returns ``(masks, thetas, j,
    stop_reason)``.
    """
    h = tr.method.msrs
    tr.configure("joint", "relaxed")
    tr.reset_optimizer(h.max_joint_epochs)
    prev = tr.current_masks()
    state = {"prev": prev, "diff": None}

    def delta():
        cur = tr.current_masks()
        d = mask_delta(state["prev"], cur)
        state["prev"], state["diff"] = cur, d[0]
        return d

    reason = "max_epochs"
    j = 0
    for j in range(1, h.max_joint_epochs + 1):
        tr.run_epoch(epoch_end_delta=delta)
        if j >= 2 and state["diff"] < h.epsilon:
            reason = "epsilon"
            break
    masks = tr.current_masks()
    thetas = {k: mp.theta.copy() for k, mp in tr.model.masked.items()}
    return masks, thetas, j, reason


def _install_masks(tr: Trainer, masks: dict) -> None:
    for k, mp in tr.model.masked.items():
        mp.theta = mp.theta * masks[k]


def _reset_moments_at(tr: Trainer, key: str, changed: np.ndarray) -> None:
    mom = tr.moments.get(key)
    if mom is not None:
        keep = 1.0 - changed
        mom.m = mom.m * keep
        mom.v = mom.v * keep


def _run_gmp(tr: Trainer, epochs: int) -> None:
    cfg = tr.method
    total = epochs * tr.steps_per_epoch
    t0 = round_half_up(cfg.gmp_start * total)
    t_end = round_half_up(cfg.gmp_end * total)
    tr.configure("train", "binary", {k: np.ones(mp.shape) for k, mp in tr.model.masked.items()},
                 forward_mask=True, grad_mask=True)
    tr.reset_optimizer(epochs)

    def on_step(_wgrads):
        t = tr.phase_step
        if t < t0 or t > t_end or not ((t - t0) % cfg.update_interval == 0 or t == t_end):
            return
        s = gmp_schedule(t, t0, t_end - t0, 0.0, cfg.target_sparsity)
        new = magnitude_prune(tr.effective_weights(), s, cfg.gmp_scope)
        for k in new:
            new[k] = new[k] * tr.masks[k]
            _reset_moments_at(tr, "t:" + k, tr.masks[k] - new[k])
        tr.masks = new
        _install_masks(tr, new)

    for _ in range(epochs):
        tr.run_epoch(on_step)


def _run_prune_grow(tr: Trainer, epochs: int, warm: bool = False) -> None:
    cfg = tr.method
    if warm:
        masks = erk_magnitude_init(tr.model.thetas(), cfg.target_sparsity)
    else:
        masks = erk_init(layer_inventory(tr.model), cfg.target_sparsity, [tr.seed, _ERK])
    tr.configure("train", "binary", masks, forward_mask=True, grad_mask=True)
    _install_masks(tr, masks)
    tr.reset_optimizer(epochs)
    total = epochs * tr.steps_per_epoch

    def on_step(wgrads):
        t = tr.phase_step
        if t % cfg.update_interval or t >= total:
            return
        zeta = zeta_schedule(t, total, cfg.prune_grow_fraction)
        rng = np.random.default_rng([tr.seed, _SET_GROWTH, t])
        new = {}
        for k, mp in tr.model.masked.items():
            if cfg.method == "set":
                m, _ = set_prune_grow(mp.theta, tr.masks[k], zeta, rng)
            else:
                m, _ = rigl_prune_grow(mp.theta, wgrads[k], tr.masks[k], zeta)
            changed = (m != tr.masks[k]).astype(np.float64)
            # pruned and grown weights both restart from zero
            mp.theta = mp.theta * (1.0 - changed) * m
            _reset_moments_at(tr, "t:" + k, changed)
            new[k] = m
        tr.masks = new

    for _ in range(epochs):
        tr.run_epoch(on_step)


def run_experiment(model_spec: ModelSpec, task, method: SparseMethodConfig,
                   optim: OptimizerConfig, seed: int, run_id: str | None = None,
                   log_interval: int = 10, init_model: Model | None = None,
                   on_record: Callable[[dict], None] | None = None,
                   checkpoint_after_joint: str | None = None,
                   resume_from: str | None = None) -> RunResult:
    """Run one method end to end and return its metric stream and final state.

    ``task`` is a :class:`Dataset` or :class:`TaskConfig`. ``init_model``
    replaces the seeded random initialization (warm starts). For ``msrs``,
    ``checkpoint_after_joint`` saves the condensed model at the phase
    boundary and ``resume_from`` continues from such a file.
    """
    from .checkpoint import checkpoint_load, checkpoint_save

    data = task if isinstance(task, Dataset) else make_dataset(task)
    h = method.msrs
    if init_model is not None:
        model = init_model.copy()
        for mp in model.masked.values():
            mp.phi = init_phi(mp.theta, h)
            mp.l_fwd, mp.l_bwd = h.l_fwd, h.l_bwd
    else:
        model = build_model(model_spec, seed, h)
    run_id = run_id or f"{method.method}-s{seed}"
    tr = Trainer(model, data, method, optim, seed, run_id, log_interval, on_record)
    T_epochs = optim.total_epochs
    result = RunResult(run_id, tr.records, model, None)

    if method.method == "dense":
        tr.configure("train", "dense")
        tr.emit_initial()
        tr.reset_optimizer(T_epochs)
        for _ in range(T_epochs):
            tr.run_epoch()
    elif method.method == "gmp":
        tr.configure("train", "dense")
        tr.emit_initial()
        _run_gmp(tr, T_epochs)
        result.masks = tr.masks
    elif method.method in ("set", "rigl"):
        tr.configure("train", "dense")
        tr.emit_initial()
        _run_prune_grow(tr, T_epochs, warm=init_model is not None)
        result.masks = tr.masks
    elif method.method == "dense_masked_grads":
        init = model.copy()
        tr.configure("joint", "relaxed")
        tr.emit_initial()
        masks, _, j, reason = msrs_joint_phase(tr)
        result.epochs_joint, result.stop_reason = j, reason
        tr.model = result.model = init
        tr.configure("train", "binary", masks, forward_mask=False, grad_mask=True)
        tr.reset_optimizer(T_epochs)
        for _ in range(T_epochs):
            tr.run_epoch()
        result.masks = masks
    else:
        if resume_from is None:
            tr.configure("joint", "relaxed")
            tr.emit_initial()
            masks, thetas, j, reason = msrs_joint_phase(tr)
            for k, w in condense(thetas, masks).items():
                model.masked[k].theta = w
            tr.moments = {}
            if checkpoint_after_joint:
                checkpoint_save(checkpoint_after_joint, model, {}, _counters(tr, j, reason), masks)
        else:
            model, _, counters, masks = checkpoint_load(resume_from)
            tr.model = result.model = model
            tr.epoch, tr.step = int(counters["epoch"]), int(counters["step"])
            j = int(counters["epochs_joint"])
            reason = "epsilon" if counters["stop_epsilon"] else "max_epochs"
        result.epochs_joint, result.stop_reason, result.masks = j, reason, masks
        if method.dense_after:
            tr.configure("continue", "dense")
        else:
            tr.configure("continue", "binary", masks, forward_mask=True, grad_mask=True)
        tr.reset_optimizer(T_epochs)
        for _ in range(T_epochs):
            tr.run_epoch()
    result.model = tr.model
    result.lr_trace = tr.lr_trace
    result.moments = tr.moments
    result.counters = _counters(tr, result.epochs_joint, result.stop_reason)
    return result


def _counters(tr: Trainer, j, reason) -> dict:
    return {
        "epoch": float(tr.epoch),
        "step": float(tr.step),
        "phase_step": float(tr.phase_step),
        "epochs_joint": float(j or 0),
        "stop_epsilon": 1.0 if reason == "epsilon" else 0.0,
    }


def lambda_sweep(model_spec: ModelSpec, task, method: SparseMethodConfig, optim: OptimizerConfig,
                 lambdas, seeds, log_interval: int = 10,
                 run_hook: Callable[[float, int, RunResult | None, Exception | None], None] | None = None,
                 ) -> list[dict]:
    """Run MSRS for every (lambda, seed) cell.

    Failed cells are kept with ``status="failed"``; rows are ordered by
    lambda then seed.
    """
    lambdas = list(lambdas)
    seeds = list(seeds)
    rows = []
    for li, lam in enumerate(lambdas):
        for seed in seeds:
            cfg = replace(method, method="msrs", msrs=replace(method.msrs, lam=float(lam)))
            try:
                res = run_experiment(model_spec, task, cfg, optim, seed,
                                     run_id=f"lambda{li}-s{seed}", log_interval=log_interval)
            except (NumericalAbort, ValueError) as exc:
                log.warning("sweep cell lambda=%g seed=%d failed: %s", lam, seed, exc)
                rows.append({"lambda": float(lam), "seed": seed, "final_sparsity": None,
                             "final_loss": None, "epochs_joint": None, "status": "failed"})
                if run_hook:
                    run_hook(lam, seed, None, exc)
                continue
            rows.append({"lambda": float(lam), "seed": seed,
                         "final_sparsity": res.final_sparsity, "final_loss": res.final_loss,
                         "epochs_joint": res.epochs_joint, "status": "ok"})
            if run_hook:
                run_hook(lam, seed, res, None)
    return rows


def sweep_means(rows: list[dict]) -> list[tuple[float, float, float]]:
    """``(lambda, mean final sparsity, mean final loss)`` over successful cells."""
    out = []
    for lam in dict.fromkeys(r["lambda"] for r in rows):
        ok = [r for r in rows if r["lambda"] == lam and r["status"] == "ok"]
        if ok:
            out.append((lam, float(np.mean([r["final_sparsity"] for r in ok])),
                        float(np.mean([r["final_loss"] for r in ok]))))
    return out
