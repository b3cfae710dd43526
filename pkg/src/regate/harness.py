"""Teacher pretraining plus gated fine-tuning runs and their orchestration."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .config import ExperimentConfig
from .data import DatasetSplits, Role, TokenSequence, collate, drop_degenerate, generate_dataset
from .gating import GateDecision, assemble_batch_mask, build_mask, candidate_indices, full_decision
from .model import (
    ModelParams,
    dense_label_loss,
    forward_dense,
    forward_sparse,
    init_params,
    next_token_ref_loss,
    per_token_losses,
    save_checkpoint,
    student_label_loss,
    teacher_ref_loss,
)
from .schedule import SparsitySchedule
from .scoring import DifficultyBuffer, RefLossCache, combined_score

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "p", "tokens_forwarded", "label_tokens_kept", "train_loss",
                   "heldout_loss", "ms_per_step")
SUMMARY_KEYS = ("total_tokens", "total_steps", "wall_clock", "final_heldout_loss")

LAMBDA_DESCRIPTIONS = {0.0: "Student EMA Only", 1.0: "Reference Loss Only", 0.5: "Combined Signals"}


class EpochSampler:
    """Yields index batches; each epoch is a fresh permutation seeded by (seed, epoch)."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ValueError("cannot sample batches from an empty set")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed

    def __iter__(self) -> Iterator[np.ndarray]:
        epoch = 0
        while True:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch]))
            order = rng.permutation(self.n)
            for i in range(0, self.n, self.batch_size):
                yield order[i:i + self.batch_size]
            epoch += 1


def make_optimizer(kind: str, lr: float):
    return ad.Adam(lr) if kind == "adam" else ad.SGD(lr)


# -- teacher -------------------------------------------------------------------------


@dataclass
class TeacherReport:
    steps: int
    heldout_copy_loss: float
    heldout_visual_loss: float
    reached_target: bool
    sha256: str


def label_loss_by_kind(params: ModelParams, seqs: Sequence[TokenSequence], text_only: bool = True) -> tuple[float, float]:
    """Mean teacher-style loss on (copy labels, visual-dependent labels)."""
    pad = params.config.pad_id
    copy_l, vis_l = [], []
    for s in seqs:
        src = s.text_only(pad) if text_only else s
        with ad.no_grad():
            batch = collate([src], pad)
            losses = per_token_losses(forward_dense(params, batch), batch, batch.label_mask).data
        for pos in s.label_positions:
            (vis_l if s.visual_dependent[pos] else copy_l).append(float(losses[pos]))
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")  # noqa: E731
    return mean(copy_l), mean(vis_l)


def _copy_label_loss(params: ModelParams, seqs: Sequence[TokenSequence]) -> float:
    pad = params.config.pad_id
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(seqs), 256):
            chunk = seqs[i:i + 256]
            batch = collate([s.text_only(pad) for s in chunk], pad)
            copy_pos = batch.label_mask & ~np.stack([s.visual_dependent for s in chunk])
            losses = per_token_losses(forward_dense(params, batch), batch, copy_pos).data
            total += float(losses.astype(np.float64).sum())
            count += int(copy_pos.sum())
    return total / max(count, 1)


def pretrain_teacher(cfg: ExperimentConfig, splits: DatasetSplits | None = None,
                     params: ModelParams | None = None) -> tuple[ModelParams, TeacherReport]:
    """Train the backbone on text-only data, then return a frozen copy.

    Training stops once the held-out copy-label loss drops below
    ``cfg.teacher.target_loss`` or the step budget runs out (with a warning).
    """
    if splits is None:
        splits = generate_dataset(cfg.task)
    mcfg = cfg.model_config()
    if params is None:
        params = init_params(mcfg, seed=cfg.seed, dtype=cfg.dtype, init_std=cfg.model.init_std)
    pad = mcfg.pad_id
    data = [s.text_only(pad) for s in drop_degenerate(splits.pretrain)]
    heldout = splits.heldout
    # without a held-out split, monitor the copy loss on part of the training data
    monitor = heldout or splits.pretrain[:256]
    tc = cfg.teacher
    opt = make_optimizer("adam", tc.lr)
    sampler = iter(EpochSampler(len(data), tc.batch_size, cfg.seed + 7919))
    steps = 0
    copy_loss = float("inf")
    reached = False
    while steps < tc.max_steps:
        idx = next(sampler)
        batch = collate([data[i] for i in idx], pad)
        logits = forward_dense(params, batch)
        loss = ad.mean_over(per_token_losses(logits, batch, batch.label_mask), int(batch.label_mask.sum()))
        params.zero_grad()
        ad.backward(loss)
        ad.optimizer_step(params.tensors, opt)
        steps += 1
        if steps % tc.eval_every == 0 or steps == tc.max_steps:
            copy_loss = _copy_label_loss(params, monitor)
            logger.info("teacher step=%d train_loss=%.4f heldout_copy_loss=%.4f", steps, float(loss.data), copy_loss)
            if copy_loss < tc.target_loss:
                reached = True
                break
    if not reached:
        logger.warning("teacher budget of %d steps expired with copy-label loss %.4f >= %.4f",
                       tc.max_steps, copy_loss, tc.target_loss)
    teacher = params.frozen()
    c, v = label_loss_by_kind(teacher, monitor)
    return teacher, TeacherReport(steps, c, v, reached, teacher.sha256())


# -- training state ---------------------------------------------------------------------


@dataclass
class MetricsRecord:
    step: int
    p: float
    tokens_forwarded: int
    label_tokens_kept: int
    train_loss: float
    heldout_loss: float | None
    ms_per_step: float
    label_tokens_total: int = 0

    def row(self) -> list[str]:
        return [str(self.step), repr(float(self.p)), str(self.tokens_forwarded), str(self.label_tokens_kept),
                repr(float(self.train_loss)), "" if self.heldout_loss is None else repr(float(self.heldout_loss)),
                repr(float(self.ms_per_step))]


@dataclass
class TrainState:
    cfg: ExperimentConfig
    mode: str
    params: ModelParams
    teacher: ModelParams | None
    lam: float
    optimizer: object
    buffer: DifficultyBuffer
    cache: RefLossCache = field(default_factory=RefLossCache)
    step: int = 0
    total_tokens: int = 0
    total_label_tokens: int = 0
    last_kept: dict[int, tuple[int, ...]] = field(default_factory=dict)
    unobserved_scored: int = 0

    @property
    def schedule(self) -> SparsitySchedule:
        return self.cfg.schedule


def new_state(cfg: ExperimentConfig, mode: str, student_init: ModelParams, teacher: ModelParams | None,
              lam: float | None = None) -> TrainState:
    if mode not in ("baseline", "regate"):
        raise ValueError(f"mode must be baseline or regate, got {mode!r}")
    if mode == "regate" and teacher is None:
        raise ValueError("regate mode needs a teacher")
    params = student_init.copy(requires_grad=True)
    return TrainState(cfg=cfg, mode=mode, params=params, teacher=teacher,
                      lam=cfg.score.lam if lam is None else float(lam),
                      optimizer=make_optimizer(cfg.optim.kind, cfg.optim.lr),
                      buffer=DifficultyBuffer(cfg.score.beta))


def reference_losses(state: TrainState, seq: TokenSequence) -> np.ndarray:
    """Cached reference losses for ``seq`` (computed on first encounter)."""

    def compute():
        ref = teacher_ref_loss(state.teacher, seq)
        if state.cfg.train.gate_prompt_tokens:
            prompt = candidate_indices(seq, True, state.params.config.bos_id)
            prompt = prompt[seq.roles[prompt] == Role.PROMPT]
            extra = next_token_ref_loss(state.teacher, seq, prompt)
            ref = np.where(np.isnan(ref), extra, ref)
        return ref

    return state.cache.ensure(seq.sample_id, compute)


def gate_batch(state: TrainState, seqs: Sequence[TokenSequence], p: float) -> list[GateDecision]:
    gate_prompt = state.cfg.train.gate_prompt_tokens
    bos = state.params.config.bos_id
    decisions = []
    for s in seqs:
        cand = candidate_indices(s, gate_prompt, bos)
        state.buffer.register(s.sample_id, s.label_positions)
        if state.mode == "baseline" or p >= 1.0:
            decisions.append(full_decision(s, cand))
            continue
        if state.lam > 0.0:
            reference_losses(state, s)
        scores = {}
        for pos in cand:
            if not state.buffer.get(s.sample_id, pos)[1] and s.roles[pos] == Role.LABEL:
                state.unobserved_scored += 1
            scores[int(pos)] = combined_score(state.buffer, state.cache, s.sample_id, int(pos), state.lam)
        decisions.append(build_mask(s, scores, p, cand))
    return decisions


def train_step(state: TrainState, seqs: Sequence[TokenSequence]) -> MetricsRecord:
    """One optimizer step on ``seqs``; returns the step's metrics (no held-out eval)."""
    t0 = time.perf_counter()
    seqs = drop_degenerate(seqs)
    if not seqs:
        raise RuntimeError("batch has no usable samples")
    p = state.schedule.keep_fraction(state.step) if state.mode == "regate" else 1.0
    if state.mode == "regate" and state.lam > 0.0 and p >= 1.0:
        # warm the cache on first encounter so dense steps also populate it
        for s in seqs:
            reference_losses(state, s)
    before = state.unobserved_scored
    decisions = gate_batch(state, seqs, p)
    if state.unobserved_scored > before and state.step >= state.schedule.warmup:
        logger.warning("step %d scored %d never-observed label positions with m=0",
                       state.step, state.unobserved_scored - before)
    batch = collate(seqs, state.params.config.pad_id)
    mask = assemble_batch_mask(decisions, batch.tokens.shape[1])
    logits = forward_sparse(state.params, batch, mask)
    loss, per_pos = student_label_loss(logits, batch, mask, state.cfg.train.loss_normalization)
    if not math.isfinite(float(loss.data)):
        raise ad.NonFiniteError(f"non-finite training loss at step {state.step}")
    state.params.zero_grad()
    ad.backward(loss)
    ad.optimizer_step(state.params.tensors, state.optimizer)
    kept_labels = batch.label_mask & mask
    for b, s in enumerate(seqs):
        for pos in np.flatnonzero(kept_labels[b]):
            state.buffer.update(s.sample_id, int(pos), float(per_pos[b, pos]))
        state.last_kept[s.sample_id] = decisions[b].kept_positions
    n_fwd = int(mask.sum())
    n_lab = int(kept_labels.sum())
    state.total_tokens += n_fwd
    state.total_label_tokens += n_lab
    ms = (time.perf_counter() - t0) * 1000.0 if state.cfg.train.record_wall_clock else 0.0
    rec = MetricsRecord(state.step, p, n_fwd, n_lab, float(loss.data), None, ms, int(batch.label_mask.sum()))
    state.step += 1
    return rec


# -- runs --------------------------------------------------------------------------------


@dataclass
class ArmResult:
    arm: str
    state: TrainState
    metrics: list[MetricsRecord]
    summary: dict


def _metrics_header(cfg: ExperimentConfig, arm: str, lam: float) -> list[str]:
    return [f"# regate {__version__} arm={arm} seed={cfg.seed} lam={lam}",
            f"# schedule {cfg.schedule.describe()}"]


def write_metrics_csv(path, records: Sequence[MetricsRecord], header_lines: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_metrics_csv(path) -> tuple[list[dict], dict]:
    """Rows as dicts of floats (``heldout_loss`` may be None) plus header comments parsed as key=value."""
    meta: dict = {}
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
        elif line.strip():
            body.append(line)
    reader = csv.DictReader(body)
    if reader.fieldnames is None or tuple(reader.fieldnames) != METRICS_COLUMNS:
        raise ValueError(f"{path}: header {reader.fieldnames} does not match {list(METRICS_COLUMNS)}")
    rows = []
    for i, r in enumerate(reader):
        try:
            rows.append({
                "step": int(r["step"]),
                "p": float(r["p"]),
                "tokens_forwarded": int(r["tokens_forwarded"]),
                "label_tokens_kept": int(r["label_tokens_kept"]),
                "train_loss": float(r["train_loss"]),
                "heldout_loss": float(r["heldout_loss"]) if r["heldout_loss"] else None,
                "ms_per_step": float(r["ms_per_step"]),
            })
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}: malformed row {i + 1}: {exc}") from exc
    return rows, meta


def train_arm(cfg: ExperimentConfig, mode: str, splits: DatasetSplits, teacher: ModelParams | None,
              student_init: ModelParams, lam: float | None = None, label_budget: int | None = None,
              n_steps: int | None = None, arm: str | None = None) -> ArmResult:
    """Fine-tune one arm; stops after ``n_steps`` or once ``label_budget`` label tokens were used."""
    state = new_state(cfg, mode, student_init, teacher, lam)
    arm = arm or mode
    tc = cfg.train
    finetune = drop_degenerate(splits.finetune)
    heldout = splits.heldout
    sampler = iter(EpochSampler(len(finetune), tc.batch_size, cfg.seed))
    limit = tc.max_steps if label_budget is not None else (n_steps or tc.n_steps)
    records: list[MetricsRecord] = []
    last_eval = None
    t_start = time.perf_counter()
    while state.step < limit:
        idx = next(sampler)
        rec = train_step(state, [finetune[i] for i in idx])
        done = (state.step >= limit) or (label_budget is not None and state.total_label_tokens >= label_budget)
        if heldout and (state.step % tc.eval_every == 0 or done):
            last_eval = dense_label_loss(state.params, heldout)
            rec.heldout_loss = last_eval
        records.append(rec)
        if state.step % tc.log_every == 0 or done:
            logger.info("arm=%s step=%d p=%.3f train_loss=%.4f heldout=%s tokens=%d label_tokens=%d",
                        arm, state.step, rec.p, rec.train_loss,
                        "-" if rec.heldout_loss is None else f"{rec.heldout_loss:.4f}",
                        state.total_tokens, state.total_label_tokens)
        if done:
            break
    if label_budget is not None and state.total_label_tokens < label_budget:
        logger.warning("arm %s hit max_steps=%d before label budget %d", arm, limit, label_budget)
    wall = time.perf_counter() - t_start if tc.record_wall_clock else 0.0
    summary = {
        "version": __version__,
        "arm": arm,
        "mode": mode,
        "seed": cfg.seed,
        "lam": state.lam,
        "total_tokens": state.total_tokens,
        "total_label_tokens": state.total_label_tokens,
        "label_tokens_available": int(sum(r.label_tokens_total for r in records)),
        "total_steps": state.step,
        "wall_clock": wall,
        "final_heldout_loss": last_eval,
        "teacher_sha256": teacher.sha256() if teacher is not None else None,
        "schedule": asdict(cfg.schedule),
    }
    return ArmResult(arm, state, records, summary)


def save_arm(result: ArmResult, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    cfg = result.state.cfg
    write_metrics_csv(os.path.join(out_dir, f"metrics_{result.arm}.csv"), result.metrics,
                      _metrics_header(cfg, result.arm, result.state.lam))
    with open(os.path.join(out_dir, f"summary_{result.arm}.json"), "w") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_checkpoint(os.path.join(out_dir, f"student_{result.arm}.ckpt"), result.state.params,
                    {"arm": result.arm, "step": result.state.step})
    result.state.buffer.snapshot(os.path.join(out_dir, f"buffer_{result.arm}.npz"))


def prepare(cfg: ExperimentConfig, teacher: ModelParams | None = None):
    """Dataset plus (teacher, student init); pretrains the teacher if none is given."""
    splits = generate_dataset(cfg.task)
    report = None
    if teacher is None:
        teacher, report = pretrain_teacher(cfg, splits)
    return splits, teacher, teacher.copy(requires_grad=True), report


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None, teacher: ModelParams | None = None,
                   modes: Sequence[str] | None = None) -> dict[str, ArmResult]:
    """Run baseline and/or regate arms on identical data, seeds and initial weights."""
    modes = list(modes or (("baseline", "regate") if cfg.mode == "both" else (cfg.mode,)))
    splits, teacher, init, report = prepare(cfg, teacher)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "teacher.ckpt"), teacher,
                        {"sha256": teacher.sha256(), **(asdict(report) if report else {})})
    results: dict[str, ArmResult] = {}
    for mode in modes:
        budget = None
        if mode == "regate" and cfg.train.match_label_budget and "baseline" in results:
            budget = results["baseline"].state.total_label_tokens
        res = train_arm(cfg, mode, splits, teacher, init, label_budget=budget)
        results[mode] = res
        if out_dir is not None:
            save_arm(res, out_dir)
    return results


def lambda_description(lam: float) -> str:
    return LAMBDA_DESCRIPTIONS.get(float(lam), f"lambda={lam:g}")


def ablate_lambda(cfg: ExperimentConfig, lambdas: Sequence[float] | None = None, out_dir: str | None = None,
                  teacher: ModelParams | None = None) -> list[dict]:
    """One regate run per lambda with identical seeds; returns the comparison table rows."""
    lambdas = list(cfg.ablation_lambdas if lambdas is None else lambdas)
    splits, teacher, init, report = prepare(cfg, teacher)
    rows = []
    for lam in lambdas:
        arm = f"regate_lam{lam:g}"
        res = train_arm(cfg, "regate", splits, teacher, init, lam=lam, arm=arm)
        if out_dir is not None:
            save_arm(res, out_dir)
        rows.append({
            "lambda": float(lam),
            "description": lambda_description(lam),
            "heldout_loss": res.summary["final_heldout_loss"],
            "label_tokens": res.state.total_label_tokens,
            "tokens_forwarded": res.state.total_tokens,
            "cache_reads": res.state.cache.reads,
        })
    if out_dir is not None:
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["lambda", "description", "heldout_loss", "label_tokens"],
                               extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rows


# -- inspection -----------------------------------------------------------------------------


def score_records(seq: TokenSequence, ref: np.ndarray, buffer: DifficultyBuffer | None, lam: float,
                  kept_last_step: Sequence[int] = ()) -> list[dict]:
    """Per-token inspection records; the top half of scored tokens by ref loss is flagged."""
    scored = [int(i) for i in np.flatnonzero(~np.isnan(ref))]
    n_flag = max(1, len(scored) // 2) if scored else 0
    flagged = set(sorted(scored, key=lambda i: (-ref[i], i))[:n_flag])
    kept = set(int(k) for k in kept_last_step)
    out = []
    for i in range(len(seq)):
        r = None if math.isnan(ref[i]) else float(ref[i])
        ema = None
        if buffer is not None and (seq.sample_id, i) in buffer:
            m, observed = buffer.get(seq.sample_id, i)
            ema = m if observed else None
        combined = None if r is None else (ema or 0.0) + lam * r
        out.append({
            "sample_id": int(seq.sample_id),
            "position": i,
            "token": int(seq.tokens[i]),
            "role": Role(int(seq.roles[i])).name.lower(),
            "ref_loss": r,
            "ema": ema,
            "combined": combined,
            "kept_last_step": i in kept,
            "flagged": i in flagged,
        })
    return out


def score_dump(teacher: ModelParams, seqs: Sequence[TokenSequence], state: TrainState | None = None,
               lam: float = 0.5) -> Iterator[dict]:
    """Yield inspection records for ``seqs`` using ``state``'s buffer and cache when given."""
    for s in seqs:
        if state is not None:
            ref = reference_losses(state, s)
            yield from score_records(s, ref, state.buffer, state.lam, state.last_kept.get(s.sample_id, ()))
        else:
            yield from score_records(s, teacher_ref_loss(teacher, s), None, lam)
