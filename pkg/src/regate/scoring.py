"""Per-token difficulty from the student EMA blended with the teacher reference loss."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT = "regate-buffer/1"

Key = tuple[int, int]


@dataclass(frozen=True)
class ScoreConfig:
    beta: float = 0.9
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if not self.lam >= 0.0:
            raise ValueError("lam must be >= 0")


class DifficultyBuffer:
    """EMA of the student's loss keyed by ``(sample_id, position)``.

    Entries are created for label positions (``register``) and hold
    ``(value, observed)``. The first observation replaces the value outright;
    later ones blend with decay ``beta``.
    """

    def __init__(self, beta: float = 0.9):
        if not 0.0 < beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        self.beta = float(beta)
        self._m: dict[Key, float] = {}
        self._observed: dict[Key, bool] = {}

    def __len__(self) -> int:
        return len(self._m)

    def __contains__(self, key: Key) -> bool:
        return key in self._m

    def register(self, sample_id: int, positions: Iterable[int]) -> None:
        for pos in positions:
            key = (int(sample_id), int(pos))
            if key not in self._m:
                self._m[key] = 0.0
                self._observed[key] = False

    def update(self, sample_id: int, position: int, loss: float) -> float:
        loss = float(loss)
        if not math.isfinite(loss) or loss < 0:
            raise ValueError(f"EMA update needs a finite non-negative loss, got {loss}")
        key = (int(sample_id), int(position))
        if self._observed.get(key, False):
            m = self.beta * self._m[key] + (1.0 - self.beta) * loss
        else:
            m = loss
        self._m[key] = m
        self._observed[key] = True
        return m

    def get(self, sample_id: int, position: int) -> tuple[float, bool]:
        key = (int(sample_id), int(position))
        return self._m.get(key, 0.0), self._observed.get(key, False)

    def items(self):
        for key, m in self._m.items():
            yield key, m, self._observed[key]

    def __eq__(self, other) -> bool:
        if not isinstance(other, DifficultyBuffer):
            return NotImplemented
        return self.beta == other.beta and self._m == other._m and self._observed == other._observed

    # -- persistence --

    def snapshot(self, path) -> None:
        keys = sorted(self._m)
        ids = np.array([k[0] for k in keys], dtype=np.int64)
        pos = np.array([k[1] for k in keys], dtype=np.int64)
        vals = np.array([self._m[k] for k in keys], dtype=np.float64)
        obs = np.array([self._observed[k] for k in keys], dtype=bool)
        with open(path, "wb") as fh:
            np.savez(fh, format=np.array(SNAPSHOT_FORMAT), beta=np.float64(self.beta),
                     sample_id=ids, position=pos, value=vals, observed=obs)

    @classmethod
    def restore(cls, path) -> "DifficultyBuffer":
        with np.load(path, allow_pickle=False) as z:
            fmt = str(z["format"])
            if fmt != SNAPSHOT_FORMAT:
                raise ValueError(f"buffer snapshot format {fmt!r} is not {SNAPSHOT_FORMAT!r}")
            buf = cls(float(z["beta"]))
            for s, p, v, o in zip(z["sample_id"].tolist(), z["position"].tolist(),
                                  z["value"].tolist(), z["observed"].tolist()):
                buf._m[(s, p)] = v
                buf._observed[(s, p)] = bool(o)
        return buf


def ema_update(buffer: DifficultyBuffer, sample_id: int, position: int, loss: float) -> float:
    return buffer.update(sample_id, position, loss)


class RefLossCache:
    """Write-once store of teacher reference losses, one array per sample.

    ``reads`` counts lookups so callers can audit whether scoring touched it.
    """

    def __init__(self):
        self._values: dict[int, np.ndarray] = {}
        self.reads = 0

    def __contains__(self, sample_id: int) -> bool:
        return int(sample_id) in self._values

    def __len__(self) -> int:
        return len(self._values)

    def ensure(self, sample_id: int, compute: Callable[[], np.ndarray]) -> np.ndarray:
        sid = int(sample_id)
        if sid not in self._values:
            arr = np.asarray(compute(), dtype=np.float64).copy()
            arr.setflags(write=False)
            self._values[sid] = arr
        return self._values[sid]

    def put(self, sample_id: int, values: np.ndarray) -> None:
        sid = int(sample_id)
        if sid in self._values:
            raise ValueError(f"reference losses for sample {sid} already cached")
        arr = np.asarray(values, dtype=np.float64).copy()
        arr.setflags(write=False)
        self._values[sid] = arr

    def lookup(self, sample_id: int, position: int) -> float:
        sid = int(sample_id)
        if sid not in self._values:
            raise KeyError(f"no cached reference loss for sample {sid}")
        v = float(self._values[sid][int(position)])
        if math.isnan(v):
            raise KeyError(f"no reference loss at sample {sid}, position {position}")
        self.reads += 1
        return v

    def peek(self, sample_id: int) -> np.ndarray | None:
        """Array for ``sample_id`` without counting a read (for reporting)."""
        return self._values.get(int(sample_id))


def combined_score(buffer: DifficultyBuffer, cache: RefLossCache, sample_id: int, position: int,
                   lam: float) -> float:
    """Difficulty ``m + lam * ref_loss``.

    With ``lam == 0`` the cache is not consulted at all. A position that was
    never observed scores with ``m = 0``.
    """
    m, observed = buffer.get(sample_id, position)
    if not observed:
        logger.debug("scoring unobserved position (%d, %d) with m=0", sample_id, position)
    if lam == 0.0:
        return m
    return m + lam * cache.lookup(sample_id, position)
