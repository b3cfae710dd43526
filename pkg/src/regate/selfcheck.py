"""Built-in invariant checks: dense/sparse equivalence, pass-through, gradients, schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import IGNORE, Batch, Role
from .model import (
    ModelConfig,
    ModelParams,
    dense_decoder_layer,
    embed,
    forward_dense,
    forward_sparse,
    init_params,
    sparse_decoder_layer,
    student_label_loss,
)
from .schedule import SparsitySchedule


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def small_config(**kw) -> ModelConfig:
    base = dict(n_layers=2, n_heads=2, d_model=32, d_ff=64, vocab_size=24, max_seq_len=12,
                visual_id_range=(16, 24), pad_id=0, bos_id=1)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(cfg: ModelConfig, rng: np.random.Generator, b: int = 3, t: int = 10,
                 n_visual: int = 3, n_label: int = 3) -> Batch:
    """Batch shaped like the synthetic task: BOS, prompt, visual, label positions."""
    lo, hi = cfg.visual_id_range
    n_prompt = t - 1 - n_visual - n_label
    tokens = np.empty((b, t), dtype=np.int64)
    tokens[:, 0] = cfg.bos_id
    tokens[:, 1:1 + n_prompt] = rng.integers(2, lo, size=(b, n_prompt))
    tokens[:, 1 + n_prompt:1 + n_prompt + n_visual] = rng.integers(lo, hi, size=(b, n_visual))
    tokens[:, t - n_label:] = rng.integers(2, lo, size=(b, n_label))
    roles = np.full((b, t), Role.PROMPT, dtype=np.int8)
    roles[:, 1 + n_prompt:1 + n_prompt + n_visual] = Role.VISUAL
    roles[:, t - n_label:] = Role.LABEL
    labels = np.full((b, t), IGNORE, dtype=np.int64)
    labels[:, t - n_label:] = rng.integers(2, lo, size=(b, n_label))
    return Batch(np.arange(b), tokens, roles, labels, np.full(b, t))


def random_gate_mask(batch: Batch, rng: np.random.Generator, keep_prob: float = 0.5) -> np.ndarray:
    """Random mask that keeps every non-label position and at least one label per row."""
    mask = rng.random(batch.tokens.shape) < keep_prob
    mask |= batch.roles != Role.LABEL
    for b in range(mask.shape[0]):
        labels = np.flatnonzero(batch.roles[b] == Role.LABEL)
        if not mask[b, labels].any():
            mask[b, rng.choice(labels)] = True
    return mask


def gated_loss_fn(params: ModelParams, batch: Batch, mask: np.ndarray) -> Callable[[], ad.Tensor]:
    def f():
        logits = forward_sparse(params, batch, mask)
        return student_label_loss(logits, batch, mask)[0]

    return f


def analytic_grads(params: ModelParams, loss_fn) -> dict[str, np.ndarray]:
    params.zero_grad()
    loss = loss_fn()
    ad.backward(loss)
    return {k: t.grad.copy() for k, t in params.tensors.items()}


def finite_difference(params: ModelParams, loss_fn, name: str, coords, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. selected flat coordinates of one tensor."""
    arr = params[name].data
    flat = arr.reshape(-1)
    out = np.empty(len(coords))
    with ad.no_grad():
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            up = float(loss_fn().data)
            flat[c] = orig - h
            down = float(loss_fn().data)
            flat[c] = orig
            out[j] = (up - down) / (2 * h)
    return out


def gradient_check(params: ModelParams, loss_fn, rng: np.random.Generator, per_tensor: int = 6,
                   h: float = 1e-5) -> float:
    """Worst per-tensor relative error between backprop and central differences."""
    grads = analytic_grads(params, loss_fn)
    worst = 0.0
    for name, t in params.tensors.items():
        n = t.data.size
        coords = rng.choice(n, size=min(per_tensor, n), replace=False)
        num = finite_difference(params, loss_fn, name, coords, h)
        ana = grads[name].reshape(-1)[coords]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-10)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst


def check_dense_sparse_equivalence(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = small_config()
    params = init_params(cfg, seed=seed, dtype=np.float64, init_std=0.3)
    batch = random_batch(cfg, rng)
    ones = np.ones(batch.tokens.shape, dtype=bool)
    dense = forward_dense(params, batch).data
    sparse = forward_sparse(params, batch, ones).data
    err = float(np.abs(dense - sparse).max())
    return CheckResult("dense/sparse equivalence (float64)", err < 1e-10, f"max |diff| = {err:.2e}")


def check_pass_through(n_masks: int = 20, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = small_config()
    params = init_params(cfg, seed=seed, dtype=np.float64, init_std=0.3)
    batch = random_batch(cfg, rng)
    bad = 0
    with ad.no_grad():
        H = embed(params, batch.tokens)
        for _ in range(n_masks):
            mask = rng.random(batch.tokens.shape) < 0.5
            for l in range(cfg.n_layers):
                out = sparse_decoder_layer(params, l, H, mask)
                if not np.array_equal(out.data[~mask], H.data[~mask]):
                    bad += 1
    return CheckResult("skipped positions pass through unchanged", bad == 0, f"{bad} violating layer runs")


def check_gradients(n_seeds: int = 3) -> CheckResult:
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng(1000 + seed)
        cfg = small_config(d_model=8, d_ff=16)
        params = init_params(cfg, seed=seed, dtype=np.float64, init_std=0.5)
        batch = random_batch(cfg, rng)
        mask = random_gate_mask(batch, rng)
        worst = max(worst, gradient_check(params, gated_loss_fn(params, batch, mask), rng))
    return CheckResult("gated-loss gradients vs central differences", worst < 1e-4, f"worst rel. error {worst:.2e}")


def check_schedule() -> CheckResult:
    s = SparsitySchedule(cycle=128, dense_prefix=16, p_sparse=0.5, warmup=100)
    bad = 0
    for t in range(s.warmup + 3 * s.cycle):
        expect = 1.0 if t < s.warmup or (t - s.warmup) % s.cycle < s.dense_prefix else 0.5
        bad += s.keep_fraction(t) != expect
    return CheckResult("dual-cycle schedule exhaustive check", bad == 0, f"{bad} mismatching steps")


def check_dense_layer_equivalence(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = small_config()
    params = init_params(cfg, seed=seed, dtype=np.float64, init_std=0.3)
    batch = random_batch(cfg, rng)
    with ad.no_grad():
        H = embed(params, batch.tokens)
        a = dense_decoder_layer(params, 0, H).data
        b = sparse_decoder_layer(params, 0, H, np.ones(batch.tokens.shape, dtype=bool)).data
    err = float(np.abs(a - b).max())
    return CheckResult("single layer dense/sparse equivalence", err < 1e-10, f"max |diff| = {err:.2e}")


def run_all() -> list[CheckResult]:
    return [
        check_dense_sparse_equivalence(),
        check_dense_layer_equivalence(),
        check_pass_through(),
        check_gradients(),
        check_schedule(),
    ]
