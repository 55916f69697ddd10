"""Post-hoc reports over run and sweep directories.

CSV and text files are the machine-readable outputs. PNG figures are written
next to them as a convenience and never read back.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .train import RECORD_FIELDS

__all__ = ["ReportError", "read_metrics", "report_run", "report_sweep", "summarize_run",
           "SWEEP_HEADER", "COMPARE_HEADER"]

SWEEP_HEADER = ("lambda", "seed", "final_sparsity", "final_loss", "epochs_joint", "status")
COMPARE_HEADER = ("method", "initial_loss", "final_loss", "final_sparsity", "converged",
                  "seeds_converged", "seeds")


class ReportError(ValueError):
    pass


def read_metrics(path) -> list[dict]:
    """Parse a metrics.jsonl file; any malformed line is reported by number."""
    path = Path(path)
    if not path.is_file():
        raise ReportError(f"{path}: no such metrics file")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ReportError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ReportError(f"{path}:{lineno}: record is not an object")
            missing = [f for f in RECORD_FIELDS if f not in rec]
            if missing:
                raise ReportError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            records.append(rec)
    if not records:
        raise ReportError(f"{path}: no records")
    return records


def _read_snapshot(run_dir: Path) -> dict:
    snap = run_dir / "resolved-config.snapshot"
    out = {}
    if snap.is_file():
        for line in snap.read_text(encoding="utf-8").splitlines():
            body = line.split("#", 1)[0]
            if "=" in body:
                k, v = (p.strip() for p in body.split("=", 1))
                out[k] = v
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summarize_run(records: list[dict], snapshot: dict | None = None) -> dict:
    """Joint epochs used, stop reason and final numbers of one run."""
    snapshot = snapshot or {}
    joint = [r for r in records if r["phase"] == "joint"]
    j = max((r["epoch"] for r in joint), default=0)
    stop = "none"
    if joint:
        eps = float(snapshot.get("msrs.epsilon", 0.01))
        jmax = int(snapshot.get("msrs.max_joint_epochs", 10))
        diffs = [r["mask_sparsity_diff"] for r in joint if r["mask_sparsity_diff"] is not None]
        if j < jmax or (j >= 2 and diffs and diffs[-1] < eps):
            stop = "epsilon"
        else:
            stop = "max_epochs"
    return {
        "run_id": records[0]["run_id"],
        "epochs_joint": j,
        "stop_reason": stop,
        "initial_loss": records[0]["loss"],
        "final_loss": records[-1]["loss"],
        "final_sparsity": records[-1]["global_sparsity"],
        "records": len(records),
    }


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _layers(records: list[dict]) -> list[str]:
    for r in records:
        if r["per_layer_grad_l2"]:
            return list(r["per_layer_grad_l2"])
    return list(records[-1]["per_layer_sparsity"])


def report_run(run_dir, figures: bool = True) -> dict:
    """Write gradnorms.csv, sparsity_by_module.csv and summary.txt into ``run_dir``."""
    run_dir = Path(run_dir)
    records = read_metrics(run_dir / "metrics.jsonl")
    layers = _layers(records)

    grad_rows = []
    for r in records:
        g = r["per_layer_grad_l2"] or {}
        grad_rows.append([r["step"], r["epoch"], r["phase"]] + [g.get(k) for k in layers])
    _write_csv(run_dir / "gradnorms.csv", ["step", "epoch", "phase"] + layers, grad_rows)

    last = records[-1]["per_layer_sparsity"]
    blocks: dict[str, list[float]] = {}
    for k, v in last.items():
        blocks.setdefault(k.split(".", 1)[0], []).append(v)
    rows = [["layer", k, v] for k, v in last.items()]
    rows += [["block", b, float(np.mean(vs))] for b, vs in blocks.items()]
    rows.append(["global", "all", records[-1]["global_sparsity"]])
    _write_csv(run_dir / "sparsity_by_module.csv", ["scope", "name", "sparsity"], rows)

    summary = summarize_run(records, _read_snapshot(run_dir))
    text = "".join(f"{k}={_fmt(v)}\n" for k, v in summary.items())
    (run_dir / "summary.txt").write_text(text, encoding="utf-8")
    if figures:
        _plot_run(run_dir, records, layers)
    return summary


def read_sweep(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise ReportError(f"{path}: no such sweep file")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SWEEP_HEADER:
            raise ReportError(f"{path}:1: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(SWEEP_HEADER):
                raise ReportError(f"{path}:{lineno}: expected {len(SWEEP_HEADER)} columns")
            try:
                rows.append({
                    "lambda": float(row[0]), "seed": int(row[1]),
                    "final_sparsity": float(row[2]) if row[2] else None,
                    "final_loss": float(row[3]) if row[3] else None,
                    "epochs_joint": int(row[4]) if row[4] else None,
                    "status": row[5],
                })
            except ValueError:
                raise ReportError(f"{path}:{lineno}: malformed value") from None
    return rows


def report_sweep(sweep_dir, figures: bool = True) -> list[tuple]:
    """Per-lambda means of a sweep, written to sweep_summary.csv."""
    sweep_dir = Path(sweep_dir)
    rows = read_sweep(sweep_dir / "sweep.csv")
    out = []
    for lam in dict.fromkeys(r["lambda"] for r in rows):
        ok = [r for r in rows if r["lambda"] == lam and r["status"] == "ok"]
        if ok:
            out.append((lam, float(np.mean([r["final_sparsity"] for r in ok])),
                        float(np.mean([r["final_loss"] for r in ok])), len(ok)))
        else:
            out.append((lam, None, None, 0))
    _write_csv(sweep_dir / "sweep_summary.csv",
               ["lambda", "mean_final_sparsity", "mean_final_loss", "ok_cells"], out)
    if figures:
        _plot_sweep(sweep_dir, out)
    return out


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _plot_run(run_dir: Path, records: list[dict], layers: list[str]) -> None:
    plt = _pyplot()
    probe = [k for k in layers if k.endswith(".w1")] or layers
    steps = [r["step"] for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    cmap = plt.get_cmap("viridis")
    for i, k in enumerate(probe):
        ys = [(r["per_layer_grad_l2"] or {}).get(k) for r in records]
        ys = [y if y is not None and y > 0 else math.nan for y in ys]
        ax1.semilogy(steps, ys, color=cmap(i / max(1, len(probe) - 1)), lw=1, label=k)
    ax1.set_xlabel("step")
    ax1.set_ylabel("gradient L2 norm")
    ax1.set_title("first linear of each block")
    if len(probe) <= 8:
        ax1.legend(fontsize=7)
    ax2.plot(steps, [r["global_sparsity"] for r in records], color="black", label="global")
    ax2b = ax2.twinx()
    ax2b.semilogy(steps, [r["loss"] for r in records], color="tab:red", lw=1)
    ax2.set_xlabel("step")
    ax2.set_ylabel("sparsity")
    ax2b.set_ylabel("loss", color="tab:red")
    for s, r0, r1 in zip(steps[1:], records, records[1:]):
        if r0["phase"] != r1["phase"]:
            ax2.axvline(s, color="grey", ls=":")
    fig.tight_layout()
    fig.savefig(run_dir / "training.png", dpi=100)
    plt.close(fig)

    last = records[-1]["per_layer_sparsity"]
    fig, ax = plt.subplots(figsize=(max(5, 0.35 * len(last)), 3.5))
    ax.bar(range(len(last)), list(last.values()), color="tab:blue")
    ax.set_xticks(range(len(last)))
    ax.set_xticklabels(list(last), rotation=90, fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("final sparsity")
    fig.tight_layout()
    fig.savefig(run_dir / "sparsity_by_module.png", dpi=100)
    plt.close(fig)


def _plot_sweep(sweep_dir: Path, means: list[tuple]) -> None:
    ok = [m for m in means if m[1] is not None]
    if not ok:
        return
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogx([m[0] for m in ok], [m[1] for m in ok], "o-")
    ax.set_xlabel("lambda")
    ax.set_ylabel("mean final sparsity")
    fig.tight_layout()
    fig.savefig(sweep_dir / "lambda_sparsity.png", dpi=100)
    plt.close(fig)


def plot_compare(out_dir, rows: list[dict]) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [r["method"] for r in rows]
    ratio = [r["final_loss"] / r["initial_loss"] if r["final_loss"] is not None else math.nan
             for r in rows]
    ax.bar(names, ratio, color=["tab:green" if r["converged"] else "tab:grey" for r in rows])
    ax.axhline(0.5, color="black", ls="--", lw=1)
    ax.set_ylabel("final / initial loss (median seed)")
    ax.tick_params(axis="x", labelrotation=30)
    fig.tight_layout()
    fig.savefig(Path(out_dir) / "compare.png", dpi=100)
    plt.close(fig)
