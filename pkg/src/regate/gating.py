"""Top-k token gating from difficulty scores."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Role, TokenSequence


@dataclass(frozen=True)
class GateDecision:
    sample_id: int
    length: int
    kept_positions: tuple[int, ...]
    k: int
    n_candidates: int
    always_kept: tuple[int, ...]

    def mask(self, padded_len: int | None = None) -> np.ndarray:
        n = self.length if padded_len is None else padded_len
        m = np.zeros(n, dtype=bool)
        m[list(self.always_kept)] = True
        m[list(self.kept_positions)] = True
        return m


def keep_count(p: float, n_candidates: int) -> int:
    """``max(1, floor(p * N))`` for ``N >= 1``."""
    if n_candidates < 1:
        raise ValueError("no candidates to keep")
    # guard against p*N landing a hair below an integer
    return max(1, math.floor(p * n_candidates + 1e-9))


def candidate_indices(seq: TokenSequence, gate_prompt_tokens: bool = False, bos_id: int | None = None) -> np.ndarray:
    """Positions subject to gating: label positions, optionally prompt text too."""
    roles = seq.roles
    cand = roles == Role.LABEL
    if gate_prompt_tokens:
        prompt = roles == Role.PROMPT
        if bos_id is not None:
            prompt &= seq.tokens != bos_id
        cand |= prompt
    return np.flatnonzero(cand)


def build_mask(seq: TokenSequence, scores, p: float, candidates: np.ndarray | None = None) -> GateDecision:
    """Keep the ``k`` highest-scoring candidates plus every non-candidate non-pad position.

    ``scores`` is a mapping position -> score or a sequence aligned with
    ``candidates``. Ties go to the lower position.
    """
    if candidates is None:
        candidates = candidate_indices(seq)
    candidates = [int(c) for c in candidates]
    if not candidates:
        raise ValueError(f"sample {seq.sample_id} has no gating candidates")
    if isinstance(scores, Mapping):
        missing = [c for c in candidates if c not in scores]
        if missing:
            raise KeyError(f"missing scores for positions {missing}")
        vals = [float(scores[c]) for c in candidates]
    else:
        vals = [float(s) for s in scores]
        if len(vals) != len(candidates):
            raise ValueError("scores and candidates differ in length")
    k = keep_count(p, len(candidates))
    order = sorted(range(len(candidates)), key=lambda i: (-vals[i], candidates[i]))
    kept = tuple(sorted(candidates[i] for i in order[:k]))
    cand_set = set(candidates)
    always = tuple(int(i) for i in np.flatnonzero(seq.roles != Role.PAD) if int(i) not in cand_set)
    return GateDecision(int(seq.sample_id), len(seq), kept, k, len(candidates), always)


def full_decision(seq: TokenSequence, candidates: np.ndarray | None = None) -> GateDecision:
    """Decision that keeps every candidate (p = 1)."""
    if candidates is None:
        candidates = candidate_indices(seq)
    return build_mask(seq, [0.0] * len(candidates), 1.0, candidates)


def assemble_batch_mask(decisions: Sequence[GateDecision], padded_len: int) -> np.ndarray:
    """Stack per-sample masks into ``[B, padded_len]``; the pad tail stays 0."""
    out = np.zeros((len(decisions), padded_len), dtype=bool)
    for b, d in enumerate(decisions):
        if d.length > padded_len:
            raise ValueError(f"sample {d.sample_id} has length {d.length} > padded length {padded_len}")
        out[b] = d.mask(padded_len)
    return out
