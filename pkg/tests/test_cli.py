import json
import os

import pytest

from regate.accounting import format_table, reduction_pct, summarize, totals_from_rows
from regate.cli import main
from regate.harness import MetricsRecord, read_metrics_csv, write_metrics_csv

TINY = {
    "seed": 0,
    "task": {"n_pretrain": 64, "n_finetune": 32, "n_heldout": 16},
    "schedule": {"cycle": 4, "dense_prefix": 1, "p_sparse": 0.5, "warmup": 2},
    "teacher": {"max_steps": 5, "batch_size": 8, "eval_every": 5},
    "train": {"batch_size": 4, "n_steps": 10, "eval_every": 5, "log_every": 5, "record_wall_clock": False},
}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def _csv(path, arm, tokens, label_tokens, losses=(None, 1.0)):
    n = len(tokens)
    recs = [MetricsRecord(i, 1.0, tokens[i], label_tokens[i], 2.0, losses[i % len(losses)], 3.0)
            for i in range(n)]
    write_metrics_csv(path, recs, [f"# regate arm={arm}"])
    return str(path)


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_and_unknown_subcommand(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1


def test_train_regate_writes_metrics(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--mode", "regate", "--config", cfg_path, "--out", str(out), "--quiet"]) == 0
    rows, meta = read_metrics_csv(out / "metrics_regate.csv")
    assert meta["arm"] == "regate" and len(rows) == 10
    summary = json.loads((out / "summary_regate.json").read_text())
    assert summary["total_steps"] == 10
    assert sorted(os.listdir(out)) == ["buffer_regate.npz", "metrics_regate.csv", "student_regate.ckpt",
                                       "summary_regate.json", "teacher.ckpt"]
    assert json.loads(capsys.readouterr().out.splitlines()[0])["arm"] == "regate"


def test_rerun_into_fresh_directory_is_bit_identical(tmp_path, cfg_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["train", "--config", cfg_path, "--out", str(out), "--quiet"]) == 0
    for name in ("metrics_baseline.csv", "metrics_regate.csv", "student_regate.ckpt", "buffer_regate.npz",
                 "teacher.ckpt", "summary_regate.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_teacher_checkpoint_reuse(tmp_path, cfg_path):
    t = tmp_path / "t"
    assert main(["pretrain-teacher", "--config", cfg_path, "--out", str(t), "--quiet"]) == 0
    report = json.loads((t / "teacher_report.json").read_text())
    assert {"steps", "heldout_copy_loss", "heldout_visual_loss", "reached_target", "sha256"} <= set(report)
    out = tmp_path / "r"
    assert main(["train", "--mode", "baseline", "--config", cfg_path, "--out", str(out),
                 "--teacher", str(t / "teacher.ckpt"), "--quiet"]) == 0
    assert (out / "metrics_baseline.csv").exists()


def test_overrides_and_seed(tmp_path, cfg_path):
    out = tmp_path / "o"
    assert main(["train", "--mode", "baseline", "--config", cfg_path, "--out", str(out), "--quiet",
                 "--set", "train.n_steps=3", "--seed", "4"]) == 0
    rows, meta = read_metrics_csv(out / "metrics_baseline.csv")
    assert len(rows) == 3 and meta["seed"] == "4"


@pytest.mark.parametrize("override", ["train.nope=1", "schedule.cycle=0", "mode=\"sideways\"", "no_equals"])
def test_bad_overrides_exit_1(tmp_path, cfg_path, override, capsys):
    assert main(["gen-data", "--config", cfg_path, "--out", str(tmp_path), "--set", override]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_config_key_exit_1(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"n_step": 5}}))
    assert main(["gen-data", "--config", str(path), "--out", str(tmp_path)]) == 1


def test_missing_config_file_is_io_or_config_error(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) in (1, 3)


def test_gen_data_writes_json_lines(tmp_path, cfg_path):
    assert main(["gen-data", "--config", cfg_path, "--out", str(tmp_path), "--quiet"]) == 0
    lines = (tmp_path / "dataset.jsonl").read_text().splitlines()
    assert len(lines) == 64 + 32 + 16
    assert json.loads(lines[0])["split"] == "pretrain"


def test_score_dump_stdout_and_unknown_id(cfg_path, capsys):
    assert main(["score-dump", "--config", cfg_path, "--samples", "70,71", "--quiet"]) == 0
    recs = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert len(recs) == 26 and {r["sample_id"] for r in recs} == {70, 71}
    assert main(["score-dump", "--config", cfg_path, "--samples", "99999", "--quiet"]) == 1


def test_accounting_reduction_example(tmp_path, capsys):
    base = _csv(tmp_path / "metrics_baseline.csv", "baseline", [600, 400], [500, 500])
    reg = _csv(tmp_path / "metrics_regate.csv", "regate", [300, 262], [281, 281])
    assert main(["accounting", base, reg, "--json"]) == 0
    arms = json.loads(capsys.readouterr().out)["arms"]
    r = next(a for a in arms if a["arm"] == "regate")
    assert r["tokens_forwarded"] == 562
    assert round(r["tokens_forwarded_reduction_pct"], 1) == 43.8
    assert main(["accounting", base, reg]) == 0
    assert "↓ 43.80%" in capsys.readouterr().out


def test_accounting_single_arm_has_no_reduction(tmp_path, capsys):
    reg = _csv(tmp_path / "metrics_regate.csv", "regate", [300, 262], [281, 281])
    assert main(["accounting", reg, "--json"]) == 0
    arm = json.loads(capsys.readouterr().out)["arms"][0]
    assert not any(k.endswith("reduction_pct") for k in arm)
    assert main(["accounting", reg]) == 0
    assert "↓" not in capsys.readouterr().out


def test_accounting_totals_equal_recount(tmp_path):
    tokens = [13 * 16, 150, 120, 208, 99]
    labels = [64, 40, 32, 64, 30]
    path = _csv(tmp_path / "m.csv", "x", tokens, labels, losses=(None, 0.5, None, 0.25))
    rows, _ = read_metrics_csv(path)
    t = totals_from_rows("x", rows)
    assert t.tokens_forwarded == sum(tokens) == t.tokens_backpropagated
    assert t.label_tokens == sum(labels)
    assert t.wall_clock_s == pytest.approx(5 * 3.0 / 1000)
    assert t.final_heldout_loss == 0.25


def test_accounting_malformed_csv(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("step,p\n0,1\n")
    assert main(["accounting", str(bad)]) == 1
    assert main(["accounting", str(tmp_path / "absent.csv")]) == 3


def test_reduction_pct_and_table_helpers():
    assert reduction_pct(562, 1000) == pytest.approx(43.8)
    with pytest.raises(ZeroDivisionError):
        reduction_pct(1, 0)
    rows = summarize([totals_from_rows("baseline", [])], baseline="none")
    assert format_table(rows).splitlines()[1].startswith("baseline\t0\t")


def test_selfcheck_passes(capsys):
    assert main(["selfcheck"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out and all(l.startswith("[PASS]") for l in out)
