"""Per-arm token and time totals from metrics CSVs."""

from __future__ import annotations

import os
from dataclasses import dataclass

from .harness import read_metrics_csv


@dataclass
class ArmTotals:
    arm: str
    steps: int
    tokens_forwarded: int
    tokens_backpropagated: int
    label_tokens: int
    wall_clock_s: float
    final_heldout_loss: float | None


def arm_name(path: str, meta: dict) -> str:
    if "arm" in meta:
        return meta["arm"]
    stem = os.path.splitext(os.path.basename(path))[0]
    return stem[len("metrics_"):] if stem.startswith("metrics_") else stem


def totals_from_rows(arm: str, rows: list[dict]) -> ArmTotals:
    fwd = sum(r["tokens_forwarded"] for r in rows)
    heldout = [r["heldout_loss"] for r in rows if r["heldout_loss"] is not None]
    return ArmTotals(
        arm=arm,
        steps=len(rows),
        tokens_forwarded=fwd,
        # a skipped position takes no part in the backward pass either
        tokens_backpropagated=fwd,
        label_tokens=sum(r["label_tokens_kept"] for r in rows),
        wall_clock_s=sum(r["ms_per_step"] for r in rows) / 1000.0,
        final_heldout_loss=heldout[-1] if heldout else None,
    )


def load_totals(paths: list[str]) -> list[ArmTotals]:
    out = []
    for path in paths:
        rows, meta = read_metrics_csv(path)
        out.append(totals_from_rows(arm_name(path, meta), rows))
    return out


def reduction_pct(value: float, reference: float) -> float:
    """Percentage reduction of ``value`` relative to ``reference``."""
    if reference == 0:
        raise ZeroDivisionError("reference total is zero")
    return (1.0 - value / reference) * 100.0


def summarize(totals: list[ArmTotals], baseline: str = "baseline") -> list[dict]:
    """Table rows; reduction columns appear only when a baseline arm is present."""
    base = next((t for t in totals if t.arm == baseline), None)
    rows = []
    for t in totals:
        row = {
            "arm": t.arm,
            "steps": t.steps,
            "tokens_forwarded": t.tokens_forwarded,
            "tokens_backpropagated": t.tokens_backpropagated,
            "label_tokens": t.label_tokens,
            "wall_clock_s": t.wall_clock_s,
            "final_heldout_loss": t.final_heldout_loss,
        }
        if base is not None:
            for key in ("tokens_forwarded", "tokens_backpropagated", "label_tokens"):
                row[f"{key}_reduction_pct"] = reduction_pct(getattr(t, key), getattr(base, key))
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    with_red = any("label_tokens_reduction_pct" in r for r in rows)

    def cell(r, key):
        v = r[key]
        if with_red and r["arm"] != "baseline" and f"{key}_reduction_pct" in r:
            return f"{v} (↓ {r[key + '_reduction_pct']:.2f}%)"
        return str(v)

    header = ["arm", "steps", "tokens_fwd", "tokens_bwd", "label_tokens", "train_time_s", "heldout_loss"]
    lines = ["\t".join(header)]
    for r in rows:
        loss = "-" if r["final_heldout_loss"] is None else f"{r['final_heldout_loss']:.4f}"
        lines.append("\t".join([r["arm"], str(r["steps"]), cell(r, "tokens_forwarded"),
                                cell(r, "tokens_backpropagated"), cell(r, "label_tokens"),
                                f"{r['wall_clock_s']:.2f}", loss]))
    return "\n".join(lines)
