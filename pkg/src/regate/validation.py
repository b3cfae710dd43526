"""Input checks shared by the estimators."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import Role, TokenSequence
from .model import ModelConfig


def check_sequences(X, config: ModelConfig | None = None, require_labels: bool = True) -> list[TokenSequence]:
    """Validate a collection of ``TokenSequence`` and return it as a list.

    Checks role/token consistency against ``config`` when given: visual role
    iff the id is in the visual range, pad role iff the id is the pad id.
    """
    if isinstance(X, TokenSequence):
        raise TypeError("expected a sequence of TokenSequence, got a single TokenSequence")
    seqs = list(X)
    if not seqs:
        raise ValueError("empty input: at least one TokenSequence is required")
    for s in seqs:
        if not isinstance(s, TokenSequence):
            raise TypeError(f"expected TokenSequence, got {type(s).__name__}")
        if config is not None:
            check_roles(s, config)
            if len(s) > config.max_seq_len:
                raise ValueError(f"sample {s.sample_id}: length {len(s)} > max_seq_len {config.max_seq_len}")
            if s.tokens.min() < 0 or s.tokens.max() >= config.vocab_size:
                raise ValueError(f"sample {s.sample_id}: token id outside the vocabulary")
    if require_labels and not any((s.roles == Role.LABEL).any() for s in seqs):
        raise ValueError("no sample has a label position")
    ids = [s.sample_id for s in seqs]
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids must be unique")
    return seqs


def check_roles(seq: TokenSequence, config: ModelConfig) -> None:
    vis_role = seq.roles == Role.VISUAL
    if not np.array_equal(vis_role, config.is_visual(seq.tokens)):
        raise ValueError(f"sample {seq.sample_id}: visual role and visual id range disagree")
    pad_role = seq.roles == Role.PAD
    if not np.array_equal(pad_role, seq.tokens == config.pad_id):
        raise ValueError(f"sample {seq.sample_id}: pad role and pad id disagree")
    lab = seq.roles == Role.LABEL
    if np.any(seq.labels[lab] < 0) or np.any(seq.labels[lab] >= config.vocab_size):
        raise ValueError(f"sample {seq.sample_id}: label target outside the vocabulary")


def check_mask(mask, shape: Sequence[int]) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} != {tuple(shape)}")
    if mask.dtype != bool and not np.isin(mask, (0, 1)).all():
        raise ValueError("mask entries must be 0/1")
    return mask.astype(bool)
