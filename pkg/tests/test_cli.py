import csv
import json

import pytest

from msrs_lab.cli import main
from msrs_lab.config import (ConfigError, apply, base_config, known_keys, load_config,
                             parse_text, preset, render)
from msrs_lab.report import ReportError, read_metrics, summarize_run
from msrs_lab.runner import compare_rows, worker_count

# a small, fast residual run
TINY = ["--set", "model.depth=2", "--set", "model.width=8", "--set", "model.d_in=4",
        "--set", "task.d_in=4", "--set", "task.n=64", "--set", "optim.total_epochs=2",
        "--set", "optim.batch_size=32"]


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- config ----------------------------------------------------------------

def test_parse_comments_and_last_wins():
    got = parse_text("# header\nmodel.depth = 3  # trailing\n\nmodel.depth=5\n")
    assert got == {"model.depth": "5"}


def test_unknown_key_names_key_and_line():
    with pytest.raises(ConfigError, match=r"cfg:2: unknown key 'msrs.lamda'"):
        parse_text("model.depth = 3\nmsrs.lamda = 1e-3\n", "cfg")


def test_bad_value_and_bad_line():
    with pytest.raises(ConfigError, match="model.depth"):
        apply(base_config(), {"model.depth": "three"})
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_text("just words")
    with pytest.raises(ConfigError, match=r"method\.\*"):
        apply(base_config(), {"method.target_sparsity": "1.5"})


def test_render_round_trip():
    for name in ("published", "desk", "from-scratch", "warm-start", "two-spirals"):
        cfg = preset(name)
        assert apply(base_config(), parse_text(render(cfg))) == cfg


def test_defaults_cover_every_key():
    rendered = {line.split(" = ")[0] for line in render(base_config()).splitlines()}
    assert rendered == set(known_keys())


def test_published_preset_keeps_default_lambda():
    assert preset("published").method.msrs.lam == 2e-10
    assert "msrs.lambda = 2e-10" in render(preset("published"))


def test_load_config_layering(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("msrs.lambda = 3e-3\noptim.total_epochs = 4\n")
    cfg = load_config(str(p), "desk", ["optim.total_epochs=6"])
    assert cfg.method.method == "msrs"
    assert cfg.method.msrs.lam == 3e-3 and cfg.optim.total_epochs == 6
    with pytest.raises(ConfigError, match="d_in"):
        load_config(None, None, ["model.d_in=3"])


def test_worker_count(monkeypatch):
    monkeypatch.delenv("MSRS_LAB_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("MSRS_LAB_THREADS", "4")
    assert worker_count() == 4
    for bad in ("0", "two"):
        monkeypatch.setenv("MSRS_LAB_THREADS", bad)
        with pytest.raises(ConfigError):
            worker_count()


# -- report helpers ----------------------------------------------------------

def _rec(**kw):
    base = {"run_id": "r", "phase": "joint", "epoch": 0, "step": 0, "loss": 1.0,
            "global_sparsity": 0.0, "per_layer_sparsity": {}, "mask_sparsity_diff": None,
            "mask_hamming_delta": None, "per_layer_grad_l2": None, "lr_theta": 0.0,
            "lr_phi": None, "lambda": None}
    base.update(kw)
    return base


def test_summarize_stop_reasons():
    recs = [_rec(), _rec(epoch=1, mask_sparsity_diff=0.2), _rec(epoch=2, mask_sparsity_diff=0.001),
            _rec(phase="continue", epoch=3, loss=0.2)]
    s = summarize_run(recs, {"msrs.max_joint_epochs": "10"})
    assert (s["epochs_joint"], s["stop_reason"]) == (2, "epsilon")
    s = summarize_run(recs[:2], {"msrs.max_joint_epochs": "1"})
    assert s["stop_reason"] == "max_epochs"
    assert summarize_run([_rec(phase="train")])["stop_reason"] == "none"


def test_read_metrics_errors(tmp_path):
    p = tmp_path / "metrics.jsonl"
    p.write_text(json.dumps(_rec()) + "\n{oops\n")
    with pytest.raises(ReportError, match=":2: invalid JSON"):
        read_metrics(p)
    p.write_text(json.dumps({"run_id": "r"}) + "\n")
    with pytest.raises(ReportError, match=":1: missing field"):
        read_metrics(p)
    with pytest.raises(ReportError, match="no such"):
        read_metrics(tmp_path / "absent.jsonl")


def test_compare_rows_majority():
    ok = {"status": "ok", "initial_loss": 1.0, "final_sparsity": 0.0}
    per = {m: [dict(ok, final_loss=0.9)] * 3 for m in
           ("dense", "msrs", "gmp", "set", "rigl", "dense_masked_grads")}
    per["msrs"] = [dict(ok, final_loss=0.1), dict(ok, final_loss=0.2), dict(ok, final_loss=0.9)]
    per["gmp"] = [dict(ok, final_loss=0.1), {"status": "failed", "error": "x"},
                  {"status": "failed", "error": "x"}]
    rows = {r["method"]: r for r in compare_rows(per)}
    assert len(rows) == 6
    assert rows["msrs"]["converged"] and rows["msrs"]["seeds_converged"] == 2
    assert rows["msrs"]["final_loss"] == 0.2
    assert not rows["gmp"]["converged"]
    assert not rows["dense"]["converged"]


# -- command line ------------------------------------------------------------

def test_print_defaults(capsys):
    assert main(["train", "--print-defaults"]) == 0
    out = capsys.readouterr().out
    assert "msrs.lambda = 2e-10" in out and "optim.beta2 = 0.98" in out


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("msrs.lamda = 1e-3\n")
    assert main(["train", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "msrs.lamda" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["train", "--bogus"]) == 2
    assert main(["sweep", "--lambda", "", "--out", str(tmp_path)]) == 2
    assert main(["train", str(tmp_path / "missing.cfg")]) == 2
    assert main(["report", str(tmp_path)]) == 2
    capsys.readouterr()


def test_train_writes_artifacts_and_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["--quiet", "train", "--preset", "desk", *TINY, "--seed", "3",
                     "--out", str(out)]) == 0
    for name in ("metrics.jsonl", "final.ckpt", "resolved-config.snapshot"):
        assert (a / name).is_file()
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    assert "run.seed = 3" in (a / "resolved-config.snapshot").read_text()
    # the snapshot alone reproduces the run
    c = tmp_path / "c"
    assert main(["train", str(a / "resolved-config.snapshot"), "--out", str(c), "--quiet"]) == 0
    assert (c / "metrics.jsonl").read_bytes() == (a / "metrics.jsonl").read_bytes()
    assert "stop_reason=" in capsys.readouterr().out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numerical_abort_exit_3(tmp_path, capsys):
    out = tmp_path / "boom"
    rc = main(["train", "--preset", "desk", *TINY, "--set", "optim.peak_lr_theta=1e300",
               "--set", "optim.clip_norm=1e300", "--set", "optim.total_epochs=20",
               "--out", str(out), "--quiet"])
    assert rc == 3
    assert (out / "abort.json").is_file()
    assert (out / "metrics.jsonl").read_text().strip()
    assert "numerical abort" in capsys.readouterr().err


def test_report_dense_run(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["train", *TINY, "--set", "method.name=dense", "--set", "log.interval=1",
                 "--out", str(out), "--quiet"]) == 0
    assert main(["report", str(out)]) == 0
    rows = _csv(out / "sparsity_by_module.csv")
    assert rows[0] == ["scope", "name", "sparsity"]
    assert all(float(r[2]) == 0.0 for r in rows[1:])
    n_records = len((out / "metrics.jsonl").read_text().splitlines())
    assert len(_csv(out / "gradnorms.csv")) - 1 == n_records
    summary = (out / "summary.txt").read_text()
    assert "stop_reason=none" in summary
    assert (out / "training.png").stat().st_size > 0
    capsys.readouterr()


def test_report_msrs_run_and_corrupt_metrics(tmp_path, capsys):
    out = tmp_path / "m"
    assert main(["train", "--preset", "desk", *TINY, "--out", str(out), "--quiet"]) == 0
    assert main(["report", str(out), "--no-figures"]) == 0
    summary = (out / "summary.txt").read_text()
    assert "stop_reason=epsilon" in summary or "stop_reason=max_epochs" in summary
    assert not (out / "training.png").exists()
    lines = (out / "metrics.jsonl").read_text().splitlines()
    lines[2] = lines[2][:-5]
    (out / "metrics.jsonl").write_text("\n".join(lines) + "\n")
    assert main(["report", str(out)]) == 2
    assert "metrics.jsonl:3:" in capsys.readouterr().err


def test_sweep_single_cell_and_report(tmp_path, capsys):
    out = tmp_path / "sw"
    assert main(["sweep", "--preset", "desk", *TINY, "--lambda", "1e-3", "--seeds", "0",
                 "--out", str(out), "--quiet"]) == 0
    rows = _csv(out / "sweep.csv")
    assert rows[0] == ["lambda", "seed", "final_sparsity", "final_loss", "epochs_joint", "status"]
    assert len(rows) == 2 and rows[1][-1] == "ok"
    assert (out / "cells" / "lambda0-s0" / "metrics.jsonl").is_file()
    assert main(["report", str(out)]) == 0
    assert (out / "sweep_summary.csv").is_file()
    assert (out / "lambda_sparsity.png").is_file()
    capsys.readouterr()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sweep_all_failed_exit_1(tmp_path, capsys):
    rc = main(["sweep", "--preset", "desk", *TINY, "--set", "optim.peak_lr_theta=1e300",
               "--set", "optim.clip_norm=1e300", "--set", "optim.total_epochs=20",
               "--lambda", "1e-3", "--seeds", "0", "--out", str(tmp_path), "--quiet"])
    assert rc == 1
    assert _csv(tmp_path / "sweep.csv")[1][-1] == "failed"
    capsys.readouterr()


def test_gradcheck_perturbed_names_op(capsys):
    assert main(["gradcheck", "--cases", "2", "--perturb", "tanh"]) == 1
    io = capsys.readouterr()
    assert "gradcheck failed: tanh" in io.err
    assert main(["gradcheck", "--perturb", "nope"]) == 2


def test_gradcheck_small_passes(capsys):
    from msrs_lab.gradcheck import op_names
    assert main(["gradcheck", "--cases", "3", "--seed", "5"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in out] == op_names()


@pytest.mark.slow
def test_compare_writes_six_rows(tmp_path, capsys):
    out = tmp_path / "cmp"
    rc = main(["compare", "from-scratch", "--seeds", "0", "--out", str(out), "--no-figures",
               "--quiet"])
    assert rc in (0, 1)
    rows = _csv(out / "compare.csv")
    assert len(rows) == 7
    assert [r[0] for r in rows[1:]] == ["dense", "msrs", "gmp", "set", "rigl",
                                         "dense_masked_grads"]
    capsys.readouterr()
