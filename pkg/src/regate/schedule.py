"""Dual-cycle keep-fraction schedule with a global warm-up prefix."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class SparsitySchedule:
    """Keep-fraction ``p(t)`` as a pure function of the global optimizer step.

    The first ``warmup`` steps keep everything. After that the cycle phase
    starts at zero: each cycle of ``cycle`` steps is dense for its first
    ``dense_prefix`` steps and keeps ``p_sparse`` for the rest.
    """

    cycle: int = 128
    dense_prefix: int = 16
    p_sparse: float = 0.5
    warmup: int = 100

    def __post_init__(self):
        if self.cycle < 1:
            raise ValueError("cycle must be >= 1")
        if not 0 <= self.dense_prefix <= self.cycle:
            raise ValueError("dense_prefix must lie in [0, cycle]")
        if not 0.0 < self.p_sparse <= 1.0:
            raise ValueError("p_sparse must lie in (0, 1]")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")

    def keep_fraction(self, t: int) -> float:
        if t < 0:
            raise ValueError("step must be >= 0")
        if t < self.warmup:
            return 1.0
        if (t - self.warmup) % self.cycle < self.dense_prefix:
            return 1.0
        return self.p_sparse

    def cycle_mean(self) -> float:
        return (self.dense_prefix + (self.cycle - self.dense_prefix) * self.p_sparse) / self.cycle

    def expected_keep_ratio(self, n_steps: int) -> float:
        """Average of ``keep_fraction`` over steps ``[0, n_steps)``, in closed form."""
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        w = min(self.warmup, n_steps)
        rest = n_steps - w
        full, part = divmod(rest, self.cycle)
        dense_in_part = min(part, self.dense_prefix)
        total = (w + full * (self.dense_prefix + (self.cycle - self.dense_prefix) * self.p_sparse)
                 + dense_in_part + (part - dense_in_part) * self.p_sparse)
        return total / n_steps

    def describe(self) -> str:
        return (f"cycle={self.cycle} dense_prefix={self.dense_prefix} "
                f"p_sparse={self.p_sparse} warmup={self.warmup}")
