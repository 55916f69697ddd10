"""Run a resolved config into an output directory; shared by the CLI commands."""

from __future__ import annotations

import json
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .checkpoint import checkpoint_save
from .config import ConfigError, RunConfig, render
from .methods import METHODS
from .optim import NumericalAbort
from .tasks import Model, build_model
from .train import RunResult, make_dataset, run_experiment

__all__ = ["pretrain", "run_to_dir", "worker_count", "run_cells", "compare_rows",
           "COMPARE_EXPECTED"]

log = logging.getLogger(__name__)


def worker_count() -> int:
    raw = os.environ.get("MSRS_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MSRS_LAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MSRS_LAB_THREADS must be a positive integer, got {raw!r}")
    return n


def pretrain(cfg: RunConfig, seed: int) -> Model:
    """Dense pretraining for warm starts; the output head is re-drawn afterwards."""
    w = cfg.warm
    data = make_dataset(cfg.task)
    optim = replace(cfg.optim, peak_lr_theta=w.lr, total_epochs=w.epochs)
    res = run_experiment(cfg.model, data, replace(cfg.method, method="dense"), optim,
                         seed + w.seed_offset, run_id="pretrain", log_interval=10**9)
    model = res.model.copy()
    if w.reset_head:
        fresh = build_model(cfg.model, seed, cfg.method.msrs)
        model.masked["head.w"] = fresh.masked["head.w"]
        model.plain["head.b"] = fresh.plain["head.b"]
    return model


def _dump(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"))


def run_to_dir(cfg: RunConfig, out_dir, joint_checkpoint: bool = False) -> RunResult:
    """Run ``cfg`` writing metrics.jsonl, final.ckpt and resolved-config.snapshot.

    Metrics are streamed line by line so an aborted run leaves its partial
    stream behind. :class:`NumericalAbort` propagates after ``abort.json`` is
    written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved-config.snapshot").write_text(render(cfg), encoding="utf-8")
    init = pretrain(cfg, cfg.seed) if cfg.warm.enabled else None
    data = make_dataset(cfg.task)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        def sink(rec):
            fh.write(_dump(rec) + "\n")

        try:
            res = run_experiment(
                cfg.model, data, cfg.method, cfg.optim, cfg.seed,
                run_id=f"{cfg.method.method}-s{cfg.seed}", log_interval=cfg.log.interval,
                init_model=init, on_record=sink,
                checkpoint_after_joint=str(out / "joint.ckpt") if joint_checkpoint else None)
        except NumericalAbort as exc:
            fh.flush()
            (out / "abort.json").write_text(
                json.dumps({"error": str(exc), **exc.snapshot}, default=str) + "\n", encoding="utf-8")
            raise
    checkpoint_save(out / "final.ckpt", res.model, res.moments, res.counters, res.masks)
    return res


def _cell(args):
    cfg, out_dir = args
    try:
        res = run_to_dir(cfg, out_dir)
    except (NumericalAbort, ValueError) as exc:
        return {"status": "failed", "error": str(exc)}
    return {"status": "ok", "initial_loss": res.initial_loss, "final_loss": res.final_loss,
            "final_sparsity": res.final_sparsity, "epochs_joint": res.epochs_joint}


def run_cells(cells: list[tuple[RunConfig, Path]], workers: int = 1) -> list[dict]:
    """Run independent cells, serially or in worker processes; order is preserved."""
    if workers <= 1 or len(cells) <= 1:
        results = []
        for cfg, out in cells:
            log.info("cell %s", out.name)
            results.append(_cell((cfg, out)))
        return results
    with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
        return list(pool.map(_cell, cells))


# which methods are expected to converge under each comparison preset
COMPARE_EXPECTED = {
    "from-scratch": {"msrs": True, "dense": False, "gmp": False, "set": False, "rigl": False},
    "warm-start": {m: True for m in METHODS},
}


def compare_rows(per_method: dict[str, list[dict]]) -> list[dict]:
    """Aggregate per-seed results; a method converges on a strict majority of seeds."""
    rows = []
    for method in METHODS:
        cells = per_method[method]
        ok = [c for c in cells if c["status"] == "ok"]
        conv = [c["final_loss"] < 0.5 * c["initial_loss"] for c in ok]
        rows.append({
            "method": method,
            "initial_loss": statistics.median(c["initial_loss"] for c in ok) if ok else None,
            "final_loss": statistics.median(c["final_loss"] for c in ok) if ok else None,
            "final_sparsity": statistics.median(c["final_sparsity"] for c in ok) if ok else None,
            "converged": sum(conv) * 2 > len(cells),
            "seeds_converged": sum(conv),
            "seeds": len(cells),
        })
    return rows
