"""scikit-learn style wrappers around the teacher and the gated trainer.

``ReferenceTeacher`` is a transformer: ``fit`` pretrains on text-only data,
``transform`` returns per-position reference losses. ``RegateTrainer`` is an
estimator: ``fit`` fine-tunes a student with token gating, ``predict`` gives
greedy label predictions, ``score`` is the negated held-out label loss.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .config import ExperimentConfig, ModelSection, OptimConfig, TeacherConfig, TrainConfig
from .data import DatasetSplits, SyntheticTaskConfig, collate
from .harness import pretrain_teacher, train_arm
from .model import ModelParams, dense_label_loss, forward_dense, teacher_ref_loss
from .schedule import SparsitySchedule
from .scoring import ScoreConfig
from .validation import check_sequences


class ReferenceTeacher(TransformerMixin, BaseEstimator):
    def __init__(self, task=None, n_layers=2, n_heads=2, d_model=32, d_ff=64, max_seq_len=16,
                 max_steps=3000, batch_size=32, lr=3e-3, target_loss=0.3, eval_every=100,
                 dtype="float32", random_state=0):
        self.task = task
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_ff = d_ff
        self.max_seq_len = max_seq_len
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.lr = lr
        self.target_loss = target_loss
        self.eval_every = eval_every
        self.dtype = dtype
        self.random_state = random_state

    def _experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig(
            seed=self.random_state,
            model=ModelSection(self.n_layers, self.n_heads, self.d_model, self.d_ff, self.max_seq_len,
                               dtype=self.dtype),
            task=self.task or SyntheticTaskConfig(),
            teacher=TeacherConfig(self.max_steps, self.batch_size, self.lr, self.target_loss, self.eval_every),
        )

    def fit(self, X, y=None, eval_set=None):
        """Pretrain on ``X`` (visual tokens are padded out before training)."""
        cfg = self._experiment_config()
        X = check_sequences(X, cfg.model_config())
        heldout = check_sequences(eval_set, cfg.model_config()) if eval_set is not None else []
        teacher, report = pretrain_teacher(cfg, DatasetSplits(pretrain=X, heldout=heldout))
        self.params_ = teacher
        self.report_ = report
        self.config_ = cfg
        return self

    def transform(self, X):
        """``[n_samples, max_len]`` reference losses; NaN off label positions and in padding."""
        check_is_fitted(self, "params_")
        X = check_sequences(X, self.params_.config)
        width = max(len(s) for s in X)
        out = np.full((len(X), width), np.nan)
        for i, s in enumerate(X):
            out[i, :len(s)] = teacher_ref_loss(self.params_, s)
        return out


class RegateTrainer(BaseEstimator):
    def __init__(self, teacher=None, mode="regate", cycle=128, dense_prefix=16, p_sparse=0.5, warmup=100,
                 beta=0.9, lam=0.5, optimizer="adam", lr=1e-3, batch_size=16, n_steps=400,
                 label_budget=None, max_steps=5000, eval_every=50, loss_normalization="kept",
                 gate_prompt_tokens=False, random_state=0):
        self.teacher = teacher
        self.mode = mode
        self.cycle = cycle
        self.dense_prefix = dense_prefix
        self.p_sparse = p_sparse
        self.warmup = warmup
        self.beta = beta
        self.lam = lam
        self.optimizer = optimizer
        self.lr = lr
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.label_budget = label_budget
        self.max_steps = max_steps
        self.eval_every = eval_every
        self.loss_normalization = loss_normalization
        self.gate_prompt_tokens = gate_prompt_tokens
        self.random_state = random_state

    def _teacher_params(self) -> ModelParams:
        t = self.teacher
        if isinstance(t, ReferenceTeacher):
            check_is_fitted(t, "params_")
            return t.params_
        if isinstance(t, ModelParams):
            return t
        raise TypeError("teacher must be a fitted ReferenceTeacher or ModelParams")

    def _experiment_config(self, base: ExperimentConfig | None) -> ExperimentConfig:
        base = base or ExperimentConfig()
        return base.replace(
            seed=self.random_state,
            schedule=SparsitySchedule(self.cycle, self.dense_prefix, self.p_sparse, self.warmup),
            score=ScoreConfig(self.beta, self.lam),
            optim=OptimConfig(self.optimizer, self.lr),
            train=TrainConfig(batch_size=self.batch_size, n_steps=self.n_steps, eval_every=self.eval_every,
                              log_every=max(self.eval_every, 1), max_steps=self.max_steps,
                              loss_normalization=self.loss_normalization,
                              gate_prompt_tokens=self.gate_prompt_tokens, record_wall_clock=False),
        )

    def fit(self, X, y=None, eval_set=None):
        teacher = self._teacher_params()
        base = self.teacher.config_ if isinstance(self.teacher, ReferenceTeacher) else None
        cfg = self._experiment_config(base)
        X = check_sequences(X, teacher.config)
        heldout = check_sequences(eval_set, teacher.config) if eval_set is not None else []
        init = teacher.copy(requires_grad=True)
        res = train_arm(cfg, self.mode, DatasetSplits(finetune=X, heldout=heldout),
                        teacher if self.mode == "regate" else None, init, label_budget=self.label_budget)
        self.params_ = res.state.params
        self.buffer_ = res.state.buffer
        self.ref_cache_ = res.state.cache
        self.metrics_ = res.metrics
        self.summary_ = res.summary
        self.n_steps_ = res.state.step
        return self

    def predict(self, X):
        """Greedy predictions at label positions; -1 elsewhere."""
        check_is_fitted(self, "params_")
        X = check_sequences(X, self.params_.config)
        batch = collate(X, self.params_.config.pad_id)
        with ad.no_grad():
            logits = forward_dense(self.params_, batch).data
        return np.where(batch.label_mask, logits.argmax(-1), -1)

    def score(self, X, y=None):
        check_is_fitted(self, "params_")
        X = check_sequences(X, self.params_.config)
        return -dense_label_loss(self.params_, X)
