import csv
import json
import logging
import math

import numpy as np
import pytest

from regate import autodiff as ad
from regate import harness
from regate.config import ExperimentConfig, ModelSection, TeacherConfig, TrainConfig
from regate.data import DatasetSplits, SyntheticTaskConfig, generate_dataset
from regate.harness import (
    METRICS_COLUMNS,
    SUMMARY_KEYS,
    EpochSampler,
    ablate_lambda,
    gate_batch,
    new_state,
    pretrain_teacher,
    read_metrics_csv,
    reference_losses,
    score_dump,
    train_arm,
    train_step,
    write_metrics_csv,
)
from regate.model import init_params, teacher_ref_loss
from regate.schedule import SparsitySchedule

W, C = 100, 128


def _tiny_cfg(**train):
    base = dict(batch_size=4, n_steps=12, eval_every=6, log_every=6, record_wall_clock=False)
    base.update(train)
    return ExperimentConfig(task=SyntheticTaskConfig(n_pretrain=64, n_finetune=32, n_heldout=16),
                            schedule=SparsitySchedule(cycle=4, dense_prefix=1, p_sparse=0.5, warmup=2),
                            teacher=TeacherConfig(max_steps=5, batch_size=8, eval_every=5),
                            train=TrainConfig(**base))


@pytest.fixture(scope="module")
def tiny():
    cfg = _tiny_cfg()
    splits = generate_dataset(cfg.task)
    teacher = init_params(cfg.model_config(), seed=5).frozen()
    return cfg, splits, teacher


def test_epoch_sampler_is_seeded():
    a = [next(iter(EpochSampler(10, 4, 3))).tolist() for _ in range(2)]
    assert a[0] == a[1]
    assert next(iter(EpochSampler(10, 4, 4))).tolist() != a[0]


def test_epoch_sampler_reshuffles_per_epoch():
    s = EpochSampler(32, 32, seed=0)
    it = iter(s)
    e0, e1 = next(it), next(it)
    assert sorted(e0.tolist()) == sorted(e1.tolist()) == list(range(32))
    assert e0.tolist() != e1.tolist()


def test_new_state_validation(tiny):
    cfg, _, teacher = tiny
    with pytest.raises(ValueError):
        new_state(cfg, "dense", teacher, teacher)
    with pytest.raises(ValueError, match="teacher"):
        new_state(cfg, "regate", teacher, None)


def test_dense_regate_step_equals_baseline_step(tiny):
    cfg, splits, teacher = tiny
    seqs = splits.finetune[:4]
    base = new_state(cfg, "baseline", teacher, None)
    reg = new_state(cfg, "regate", teacher, teacher)
    r1, r2 = train_step(base, seqs), train_step(reg, seqs)
    assert r2.p == 1.0 and r1.tokens_forwarded == r2.tokens_forwarded
    assert r1.train_loss == r2.train_loss
    for name in base.params.tensors:
        assert base.params[name].data.tobytes() == reg.params[name].data.tobytes()


def test_sparse_step_forwards_fewer_tokens(tiny):
    cfg, splits, teacher = tiny
    seqs = splits.finetune[:4]
    dense = new_state(cfg, "regate", teacher, teacher)
    train_step(dense, seqs)
    sparse = new_state(cfg, "regate", teacher, teacher)
    train_step(sparse, seqs)
    sparse.step = 3
    dense.step = 2
    r_dense, r_sparse = train_step(dense, seqs), train_step(sparse, seqs)
    assert (r_dense.p, r_sparse.p) == (1.0, 0.5)
    assert r_sparse.tokens_forwarded < r_dense.tokens_forwarded
    assert r_sparse.label_tokens_kept == r_dense.label_tokens_kept // 2


def test_only_kept_labels_update_the_buffer(tiny):
    cfg, splits, teacher = tiny
    seqs = splits.finetune[:4]
    st = new_state(cfg, "regate", teacher, teacher)
    train_step(st, seqs)
    before = {k: (m, o) for k, m, o in st.buffer.items()}
    st.step = 3
    train_step(st, seqs)
    for s in seqs:
        kept = set(st.last_kept[s.sample_id])
        for pos in s.label_positions:
            changed = st.buffer.get(s.sample_id, pos) != before[(s.sample_id, int(pos))]
            assert changed == (int(pos) in kept)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(tiny):
    cfg, splits, teacher = tiny
    st = new_state(cfg, "baseline", teacher, None)
    st.params["head"].data[:] = np.inf
    with pytest.raises(FloatingPointError):
        train_step(st, splits.finetune[:4])


def test_unobserved_positions_after_warmup_are_logged(tiny, caplog):
    cfg, splits, teacher = tiny
    cfg = cfg.replace(schedule=SparsitySchedule(cycle=4, dense_prefix=0, p_sparse=0.5, warmup=0))
    st = new_state(cfg, "regate", teacher, teacher)
    with caplog.at_level(logging.WARNING, logger="regate.harness"):
        train_step(st, splits.finetune[:4])
    assert "never-observed" in caplog.text


def test_metrics_csv_round_trip_and_malformed(tmp_path, tiny):
    cfg, splits, teacher = tiny
    res = train_arm(cfg, "baseline", splits, None, teacher)
    path = tmp_path / "m.csv"
    write_metrics_csv(path, res.metrics, ["# regate arm=baseline seed=0"])
    rows, meta = read_metrics_csv(path)
    assert meta["arm"] == "baseline" and len(rows) == 12
    with open(path) as fh:
        header = [l for l in fh if not l.startswith("#")][0].strip()
    assert header.split(",") == list(METRICS_COLUMNS)
    assert [r["heldout_loss"] is not None for r in rows] == [(i + 1) % 6 == 0 for i in range(12)]
    path.write_text("step,p\n1,2\n")
    with pytest.raises(ValueError):
        read_metrics_csv(path)


def test_label_budget_stops_the_arm(tiny):
    cfg, splits, teacher = tiny
    res = train_arm(cfg, "regate", splits, teacher, teacher, label_budget=40)
    assert res.state.total_label_tokens >= 40
    assert res.state.total_label_tokens - res.metrics[-1].label_tokens_kept < 40


def test_teacher_budget_expiry_reports_and_warns(caplog):
    cfg = _tiny_cfg().replace(teacher=TeacherConfig(max_steps=3, batch_size=8, eval_every=10, target_loss=1e-6))
    with caplog.at_level(logging.WARNING, logger="regate.harness"):
        teacher, report = pretrain_teacher(cfg)
    assert not report.reached_target and report.steps == 3
    assert "expired" in caplog.text
    assert report.sha256 == teacher.sha256()


# -- session runs: warm-up plus two full cycles ------------------------------------------------


def test_summary_contains_declared_keys(short_runs):
    for res in short_runs.values():
        s = json.loads(json.dumps(res.summary))
        assert set(SUMMARY_KEYS) <= set(s)
        assert s["total_steps"] == W + 2 * C


def test_accounting_conservation(short_runs):
    for res in short_runs.values():
        assert sum(r.tokens_forwarded for r in res.metrics) == res.summary["total_tokens"]
        assert sum(r.label_tokens_kept for r in res.metrics) == res.summary["total_label_tokens"]
        steps = [r.step for r in res.metrics]
        assert steps == list(range(len(steps)))


def test_kept_label_fraction_over_two_cycles(short_runs):
    post = [r for r in short_runs["regate"].metrics if r.step >= W]
    assert len(post) == 2 * C
    frac = sum(r.label_tokens_kept for r in post) / sum(r.label_tokens_total for r in post)
    assert abs(frac - 0.5625) <= 0.02


def test_regate_label_tokens_track_expected_ratio(short_runs):
    base = short_runs["baseline"].state.total_label_tokens
    reg = short_runs["regate"].state.total_label_tokens
    expected = SparsitySchedule().expected_keep_ratio(W + 2 * C)
    assert reg / base == pytest.approx(expected, abs=0.01)


def test_arms_share_data_order(tiny, monkeypatch):
    cfg, splits, teacher = tiny
    seen = {"baseline": [], "regate": []}
    real = harness.train_step

    def spy(state, seqs):
        seen[state.mode].append([s.sample_id for s in seqs])
        return real(state, seqs)

    monkeypatch.setattr(harness, "train_step", spy)
    train_arm(cfg, "baseline", splits, None, teacher)
    train_arm(cfg, "regate", splits, teacher, teacher)
    assert seen["baseline"] == seen["regate"] and len(seen["baseline"]) == 12


def test_teacher_hash_constant_across_fine_tuning(pretrained, short_runs):
    teacher, report = pretrained
    assert teacher.sha256() == report.sha256
    for res in short_runs.values():
        assert res.summary["teacher_sha256"] in (None, report.sha256)
    assert short_runs["regate"].summary["teacher_sha256"] == report.sha256


def _post_warmup_decisions(short_runs, splits, n_batches=24):
    st = short_runs["regate"].state
    rng = np.random.default_rng(0)
    out = []
    for _ in range(n_batches):
        idx = rng.choice(len(splits.finetune), 16, replace=False)
        seqs = [splits.finetune[i] for i in idx]
        out.append((seqs, gate_batch(st, seqs, 0.5)))
    return st, out


def test_kept_labels_are_reference_harder(short_runs, splits):
    st, batches = _post_warmup_decisions(short_runs, splits)
    diffs = []
    for seqs, decisions in batches:
        kept, dropped = [], []
        for s, d in zip(seqs, decisions):
            ref = st.cache.peek(s.sample_id)
            for pos in s.label_positions:
                (kept if int(pos) in d.kept_positions else dropped).append(ref[pos])
        diffs.append(np.mean(kept) - np.mean(dropped))
    assert np.mean(diffs) > 0
    assert np.mean(np.array(diffs) >= 0) >= 0.9


def test_selection_agrees_with_visual_dependence(short_runs, splits):
    _, batches = _post_warmup_decisions(short_runs, splits)
    agree = total = 0
    for seqs, decisions in batches:
        for s, d in zip(seqs, decisions):
            for pos in s.label_positions:
                agree += (int(pos) in d.kept_positions) == bool(s.visual_dependent[pos])
                total += 1
    assert agree / total >= 0.7


# -- ablation and inspection -----------------------------------------------------------------


def test_ablation_arms_and_table(tmp_path, tiny):
    cfg, _, teacher = tiny
    rows = ablate_lambda(cfg, out_dir=str(tmp_path), teacher=teacher)
    assert [r["lambda"] for r in rows] == [0.0, 0.5, 1.0]
    assert [r["description"] for r in rows] == ["Student EMA Only", "Combined Signals", "Reference Loss Only"]
    assert rows[0]["cache_reads"] == 0
    assert rows[1]["cache_reads"] > 0 and rows[2]["cache_reads"] > 0
    assert len({r["tokens_forwarded"] for r in rows}) == 1
    assert len({r["label_tokens"] for r in rows}) == 1
    with open(tmp_path / "ablation.csv") as fh:
        table = list(csv.DictReader(fh))
    assert list(table[0]) == ["lambda", "description", "heldout_loss", "label_tokens"]
    assert len(table) == 3
    for lam in ("0", "0.5", "1"):
        assert (tmp_path / f"metrics_regate_lam{lam}.csv").exists()


def test_lambda_one_uses_the_literal_blend(tiny):
    cfg, splits, teacher = tiny
    st = new_state(cfg, "regate", teacher, teacher, lam=1.0)
    train_step(st, splits.finetune[:4])
    s = splits.finetune[0]
    pos = int(s.label_positions[0])
    m, _ = st.buffer.get(s.sample_id, pos)
    from regate.scoring import combined_score

    assert combined_score(st.buffer, st.cache, s.sample_id, pos, 1.0) == m + st.cache.peek(s.sample_id)[pos]


def test_score_dump_records(pretrained, splits):
    teacher, _ = pretrained
    seqs = splits.heldout[:20]
    recs = list(score_dump(teacher, seqs))
    assert len(recs) == sum(len(s) for s in seqs)
    for line in (json.dumps(r) for r in recs):
        r = json.loads(line)
        assert {"token", "role", "ref_loss", "ema", "combined", "kept_last_step"} <= set(r)
    by = {(r["sample_id"], r["position"]): r for r in recs}
    for s in seqs:
        ref = teacher_ref_loss(teacher, s)
        for pos in s.label_positions:
            assert np.float64(by[(s.sample_id, int(pos))]["ref_loss"]).tobytes() == ref[pos].tobytes()


def test_flagging_matches_visual_dependence(pretrained, splits):
    teacher, _ = pretrained
    agree = total = 0
    for s in splits.heldout:
        for r in score_dump(teacher, [s]):
            if r["role"] == "label":
                agree += r["flagged"] == bool(s.visual_dependent[r["position"]])
                total += 1
    assert agree / total >= 0.8


def test_untrained_teacher_shows_no_gap(default_cfg, splits):
    untrained = init_params(default_cfg.model_config(), seed=0).frozen()
    copy_l, vis_l = [], []
    for s in splits.heldout:
        ref = teacher_ref_loss(untrained, s)
        for pos in s.label_positions:
            (vis_l if s.visual_dependent[pos] else copy_l).append(ref[pos])
    assert abs(np.mean(vis_l) - np.mean(copy_l)) < 0.2


def test_score_dump_with_state_uses_buffer(short_runs, splits):
    st = short_runs["regate"].state
    s = splits.finetune[0]
    recs = list(score_dump(st.teacher, [s], state=st))
    labels = [r for r in recs if r["role"] == "label"]
    assert all(r["ema"] is not None for r in labels)
    for r in labels:
        assert r["combined"] == pytest.approx(r["ema"] + 0.5 * r["ref_loss"])
