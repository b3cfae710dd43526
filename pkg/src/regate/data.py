"""Token sequences, batching helpers and the synthetic copy/visual task."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

IGNORE = -1


class Role(enum.IntEnum):
    PROMPT = 0
    VISUAL = 1
    LABEL = 2
    PAD = 3


@dataclass
class TokenSequence:
    """One training sample.

    ``labels[i]`` is the next-token target scored at position ``i``; it is
    ``IGNORE`` everywhere except label-role positions. ``visual_dependent``
    is generation-time ground truth (which labels need the visual tokens);
    it is never used for training, only for audits.
    """

    sample_id: int
    tokens: np.ndarray
    roles: np.ndarray
    labels: np.ndarray
    visual_dependent: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.roles = np.asarray(self.roles, dtype=np.int8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.visual_dependent is not None:
            self.visual_dependent = np.asarray(self.visual_dependent, dtype=bool)
        n = len(self.tokens)
        if len(self.roles) != n or len(self.labels) != n:
            raise ValueError("tokens, roles and labels must have equal length")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def label_positions(self) -> np.ndarray:
        return np.flatnonzero(self.roles == Role.LABEL)

    def text_only(self, pad_id: int) -> "TokenSequence":
        """Copy with every visual-role token replaced by ``pad_id`` (length kept)."""
        tokens = self.tokens.copy()
        tokens[self.roles == Role.VISUAL] = pad_id
        return TokenSequence(self.sample_id, tokens, self.roles.copy(), self.labels.copy(),
                             None if self.visual_dependent is None else self.visual_dependent.copy())

    def to_json(self) -> dict:
        d = {
            "sample_id": int(self.sample_id),
            "tokens": self.tokens.tolist(),
            "roles": [Role(r).name.lower() for r in self.roles],
            "labels": self.labels.tolist(),
        }
        if self.visual_dependent is not None:
            d["visual_dependent"] = self.visual_dependent.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TokenSequence":
        roles = [Role[r.upper()] for r in d["roles"]]
        return cls(d["sample_id"], d["tokens"], roles, d["labels"], d.get("visual_dependent"))


@dataclass
class Batch:
    """Right-padded batch; ``tokens`` etc. are ``[B, T']``."""

    sample_ids: np.ndarray
    tokens: np.ndarray
    roles: np.ndarray
    labels: np.ndarray
    lengths: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape

    @property
    def label_mask(self) -> np.ndarray:
        return self.roles == Role.LABEL


def collate(seqs: Sequence[TokenSequence], pad_id: int, length: int | None = None) -> Batch:
    """Pad to the longest sequence in the batch (or to ``length``)."""
    if not seqs:
        raise ValueError("empty batch")
    longest = max(len(s) for s in seqs)
    t = longest if length is None else length
    if longest > t:
        raise ValueError(f"sequence of length {longest} exceeds padded length {t}")
    b = len(seqs)
    tokens = np.full((b, t), pad_id, dtype=np.int64)
    roles = np.full((b, t), Role.PAD, dtype=np.int8)
    labels = np.full((b, t), IGNORE, dtype=np.int64)
    for i, s in enumerate(seqs):
        n = len(s)
        tokens[i, :n] = s.tokens
        roles[i, :n] = s.roles
        labels[i, :n] = s.labels
    return Batch(np.array([s.sample_id for s in seqs], dtype=np.int64), tokens, roles, labels,
                 np.array([len(s) for s in seqs], dtype=np.int64))


# -- synthetic task -----------------------------------------------------------


@dataclass
class SyntheticTaskConfig:
    """Desk-scale stand-in for instruction data with visual content.

    Each sample is ``[BOS, prompt, visual, queries]``. Every query position
    is a label: a copy query asks for one prompt token, a visual query asks
    for (a fixed recoding of) one visual token. ``rho`` is the fraction of
    queries that are visual.
    """

    alphabet_size: int = 16
    visual_vocab_size: int = 16
    prompt_len: int = 4
    visual_len: int = 4
    label_len: int = 4
    rho: float = 0.5
    n_pretrain: int = 2048
    n_finetune: int = 1024
    n_heldout: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        for name in ("alphabet_size", "visual_vocab_size", "prompt_len", "visual_len", "label_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("n_pretrain", "n_finetune", "n_heldout"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def vocab(self) -> "TaskVocab":
        return TaskVocab(self)

    @property
    def seq_len(self) -> int:
        return 1 + self.prompt_len + self.visual_len + self.label_len


class TaskVocab:
    """Token id layout: pad, bos, text alphabet, query markers, visual ids."""

    def __init__(self, cfg: SyntheticTaskConfig):
        self.pad_id = 0
        self.bos_id = 1
        self.alpha_lo = 2
        self.copy_lo = self.alpha_lo + cfg.alphabet_size
        self.vq_lo = self.copy_lo + cfg.prompt_len
        self.visual_lo = self.vq_lo + cfg.visual_len
        self.visual_hi = self.visual_lo + cfg.visual_vocab_size
        self.vocab_size = self.visual_hi
        self.alphabet_size = cfg.alphabet_size

    @property
    def visual_id_range(self) -> tuple[int, int]:
        return (self.visual_lo, self.visual_hi)

    def visual_answer(self, visual_id: int) -> int:
        # fixed bijection-ish recoding of a visual id into the text alphabet
        k = visual_id - self.visual_lo
        return self.alpha_lo + (7 * k + 3) % self.alphabet_size


def _n_visual_queries(cfg: SyntheticTaskConfig) -> int:
    return int(round(cfg.rho * cfg.label_len))


def _make_sample(cfg: SyntheticTaskConfig, vocab: TaskVocab, rng: np.random.Generator,
                 sample_id: int) -> TokenSequence:
    prompt = rng.integers(vocab.alpha_lo, vocab.alpha_lo + cfg.alphabet_size, size=cfg.prompt_len)
    visual = rng.integers(vocab.visual_lo, vocab.visual_hi, size=cfg.visual_len)
    n_vis = _n_visual_queries(cfg)
    is_vis = np.zeros(cfg.label_len, dtype=bool)
    is_vis[rng.permutation(cfg.label_len)[:n_vis]] = True
    queries = np.empty(cfg.label_len, dtype=np.int64)
    answers = np.empty(cfg.label_len, dtype=np.int64)
    for j in range(cfg.label_len):
        if is_vis[j]:
            k = int(rng.integers(cfg.visual_len))
            queries[j] = vocab.vq_lo + k
            answers[j] = vocab.visual_answer(int(visual[k]))
        else:
            k = int(rng.integers(cfg.prompt_len))
            queries[j] = vocab.copy_lo + k
            answers[j] = prompt[k]
    tokens = np.concatenate([[vocab.bos_id], prompt, visual, queries])
    roles = np.concatenate([
        [Role.PROMPT] * (1 + cfg.prompt_len),
        [Role.VISUAL] * cfg.visual_len,
        [Role.LABEL] * cfg.label_len,
    ])
    labels = np.full(len(tokens), IGNORE, dtype=np.int64)
    labels[-cfg.label_len:] = answers
    vis_dep = np.zeros(len(tokens), dtype=bool)
    vis_dep[-cfg.label_len:] = is_vis
    return TokenSequence(sample_id, tokens, roles, labels, vis_dep)


@dataclass
class DatasetSplits:
    pretrain: list[TokenSequence] = field(default_factory=list)
    finetune: list[TokenSequence] = field(default_factory=list)
    heldout: list[TokenSequence] = field(default_factory=list)

    def all(self) -> list[TokenSequence]:
        return self.pretrain + self.finetune + self.heldout

    def by_id(self) -> dict[int, TokenSequence]:
        return {s.sample_id: s for s in self.all()}


def generate_dataset(cfg: SyntheticTaskConfig) -> DatasetSplits:
    """Generate the three splits; the seed fully determines every sample.

    Sample ids are consecutive across splits (pretrain, finetune, heldout).
    The pretrain split is returned with its visual tokens intact; callers
    apply ``text_only`` before feeding it to the teacher.
    """
    vocab = cfg.vocab
    streams = np.random.SeedSequence(cfg.seed).spawn(3)
    out = []
    next_id = 0
    for ss, n in zip(streams, (cfg.n_pretrain, cfg.n_finetune, cfg.n_heldout)):
        rng = np.random.default_rng(ss)
        split = []
        for _ in range(n):
            split.append(_make_sample(cfg, vocab, rng, next_id))
            next_id += 1
        out.append(split)
    return DatasetSplits(*out)


def drop_degenerate(seqs: Sequence[TokenSequence]) -> list[TokenSequence]:
    """Remove samples with no label position, logging each one."""
    kept = []
    for s in seqs:
        if not np.any(s.roles == Role.LABEL):
            logger.warning("dropping sample %d: no label positions", s.sample_id)
            continue
        kept.append(s)
    return kept
