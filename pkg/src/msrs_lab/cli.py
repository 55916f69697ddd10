"""Command-line entry point: ``msrs-lab {train,sweep,gradcheck,report,compare}``.

Exit statuses: 0 success, 1 check or comparison failure, 2 usage or config
error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import PRESETS, ConfigError, apply, default_lines, load_config
from .gradcheck import TOLERANCE, op_names, run_gradcheck
from .methods import METHODS
from .optim import NumericalAbort
from .report import (COMPARE_HEADER, SWEEP_HEADER, ReportError, plot_compare, report_run,
                     report_sweep)
from .runner import COMPARE_EXPECTED, compare_rows, run_cells, run_to_dir, worker_count

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("msrs_lab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _float_list(raw: str) -> list[float]:
    items = [s for s in raw.replace(" ", "").split(",") if s]
    try:
        return [float(s) for s in items]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {raw!r}") from None


def _int_list(raw: str) -> list[int]:
    items = [s for s in raw.replace(" ", "").split(",") if s]
    try:
        return [int(s) for s in items]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {raw!r}") from None


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="seed for every random stream")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="only print results and errors")


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="config file of dotted key = value lines")
    p.add_argument("--preset", choices=sorted(PRESETS), help="starting point before the file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msrs-lab", description="Mask-logit sparsity experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run one experiment")
    _config_flags(p)
    p.add_argument("--print-defaults", action="store_true",
                   help="print every key with its default and exit")
    p.add_argument("--joint-checkpoint", action="store_true",
                   help="also save joint.ckpt at the phase boundary (msrs)")
    _global_flags(p, suppress=True)

    p = sub.add_parser("sweep", help="grid over lambda and seeds")
    _config_flags(p)
    p.add_argument("--lambda", dest="lambdas", type=_float_list, required=True,
                   help="comma-separated lambda values")
    p.add_argument("--seeds", type=_int_list, default=None, help="comma-separated seeds")
    _global_flags(p, suppress=True)

    p = sub.add_parser("gradcheck", help="finite-difference oracle over all primitives")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--perturb", metavar="OP", default=None,
                   help="test hook: corrupt one op's analytic gradient")
    _global_flags(p, suppress=True)

    p = sub.add_parser("report", help="CSV and text reports for a run or sweep directory")
    p.add_argument("directory")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    _global_flags(p, suppress=True)

    p = sub.add_parser("compare", help="all six methods under one preset")
    p.add_argument("preset", choices=sorted(COMPARE_EXPECTED))
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--no-figures", action="store_true")
    _global_flags(p, suppress=True)
    return parser


def _resolve(args, seed_default: int | None = None):
    cfg = load_config(args.config, args.preset, args.overrides)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    elif seed_default is not None:
        cfg = replace(cfg, seed=seed_default)
    if args.out is not None:
        cfg = apply(cfg, {"log.out": args.out})
    return cfg


def cmd_train(args) -> int:
    if args.print_defaults:
        sys.stdout.write(default_lines())
        return EXIT_OK
    cfg = _resolve(args)
    out = Path(cfg.log.out)
    t0 = time.perf_counter()
    try:
        res = run_to_dir(cfg, out, joint_checkpoint=args.joint_checkpoint)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}; partial metrics in {out / 'metrics.jsonl'}", file=sys.stderr)
        return EXIT_ABORT
    log.info("done in %.1fs", time.perf_counter() - t0)
    print(f"run_id={res.run_id} initial_loss={res.initial_loss!r} final_loss={res.final_loss!r} "
          f"final_sparsity={res.final_sparsity!r} epochs_joint={res.epochs_joint} "
          f"stop_reason={res.stop_reason or 'none'} out={out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.lambdas:
        raise UsageError("sweep: --lambda needs at least one value")
    base = _resolve(args)
    seeds = args.seeds if args.seeds is not None else [base.seed]
    if not seeds:
        raise UsageError("sweep: --seeds needs at least one value")
    out = Path(base.log.out)
    cells, keys = [], []
    for li, lam in enumerate(args.lambdas):
        for s in seeds:
            cfg = apply(replace(base, seed=s), {"method.name": "msrs", "msrs.lambda": repr(lam)})
            cells.append((cfg, out / "cells" / f"lambda{li}-s{s}"))
            keys.append((lam, s))
    out.mkdir(parents=True, exist_ok=True)
    results = run_cells(cells, worker_count())
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for (lam, s), r in zip(keys, results):
            if r["status"] == "ok":
                w.writerow([repr(lam), s, repr(r["final_sparsity"]), repr(r["final_loss"]),
                            r["epochs_joint"], "ok"])
            else:
                log.warning("cell lambda=%g seed=%d failed: %s", lam, s, r["error"])
                w.writerow([repr(lam), s, "", "", "", "failed"])
    ok = sum(r["status"] == "ok" for r in results)
    print(f"sweep: {ok}/{len(results)} cells ok -> {out / 'sweep.csv'}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_gradcheck(args) -> int:
    if args.cases < 1:
        raise UsageError("gradcheck: --cases must be >= 1")
    if args.perturb is not None and args.perturb not in op_names():
        raise UsageError(f"gradcheck: unknown op {args.perturb!r}")
    seed = args.seed if args.seed is not None else 0
    results = run_gradcheck(seed, args.cases, perturb=args.perturb)
    for r in results:
        print(f"{r.op:28s} max_rel_err={r.max_rel_err:.3e} {'ok' if r.ok else 'FAIL'}")
    bad = [r for r in results if not r.ok]
    for r in bad:
        print(f"gradcheck failed: {r.op} max_rel_err={r.max_rel_err:.3e} >= {TOLERANCE:g}",
              file=sys.stderr)
    return EXIT_CHECK if bad else EXIT_OK


def cmd_report(args) -> int:
    d = Path(args.directory)
    figures = not args.no_figures
    if (d / "metrics.jsonl").is_file():
        summary = report_run(d, figures)
        print(" ".join(f"{k}={v}" for k, v in summary.items()))
        return EXIT_OK
    if (d / "sweep.csv").is_file():
        for lam, sp, loss, n in report_sweep(d, figures):
            print(f"lambda={lam!r} mean_final_sparsity={sp} mean_final_loss={loss} ok_cells={n}")
        for cell in sorted((d / "cells").glob("*/metrics.jsonl")):
            report_run(cell.parent, figures=False)
        return EXIT_OK
    raise ReportError(f"{d}: neither metrics.jsonl nor sweep.csv found")


def cmd_compare(args) -> int:
    seeds = args.seeds
    if not seeds:
        raise UsageError("compare: --seeds needs at least one value")
    base = load_config(None, args.preset)
    out = Path(args.out or f"runs/compare-{args.preset}")
    if args.seed is not None:
        # a single global seed shifts the whole seed list
        seeds = [args.seed + s for s in seeds]
    cells, keys = [], []
    for m in METHODS:
        for s in seeds:
            cfg = replace(apply(base, {"method.name": m}), seed=s)
            cells.append((cfg, out / "cells" / f"{m}-s{s}"))
            keys.append(m)
    out.mkdir(parents=True, exist_ok=True)
    results = run_cells(cells, worker_count())
    per_method = {m: [r for k, r in zip(keys, results) if k == m] for m in METHODS}
    rows = compare_rows(per_method)
    with open(out / "compare.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_HEADER)
        for r in rows:
            w.writerow([r["method"]] + ["" if r[k] is None else repr(r[k]) if isinstance(r[k], float)
                                        else str(r[k]).lower() for k in COMPARE_HEADER[1:]])
    if not args.no_figures:
        plot_compare(out, rows)
    expected = COMPARE_EXPECTED[args.preset]
    mismatched = []
    for r in rows:
        flag = "converged" if r["converged"] else "stalled"
        print(f"{r['method']:20s} {flag:9s} ({r['seeds_converged']}/{r['seeds']} seeds) "
              f"final_loss={r['final_loss']} final_sparsity={r['final_sparsity']}")
        if r["method"] in expected and expected[r["method"]] != r["converged"]:
            mismatched.append(r["method"])
    if mismatched:
        print(f"compare {args.preset}: unexpected outcome for {', '.join(mismatched)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck,
            "report": cmd_report, "compare": cmd_compare}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ReportError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ValueError as exc:
        # invalid values that slipped past config parsing (e.g. CSV datasets)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
