"""Token-to-expert assignment history and routing-fluctuation statistics."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ContractError
from .moe import BalanceStats, balance_stats

__all__ = [
    "AssignmentHistory",
    "FluctuationReport",
    "record_snapshot",
    "last_fluctuation_step",
    "last_fluctuation_steps",
    "cumulative_curve",
    "expert_token_report",
    "balance_stats",
    "BalanceStats",
    "write_fluctuation_log",
    "read_fluctuation_log",
    "write_curve_csv",
]

NONE_STEP = -1


@dataclass
class AssignmentHistory:
    """Append-only per-snapshot expert indices over one fixed validation stream."""

    token_ids: np.ndarray
    snapshot_interval: int | None = None
    steps: list[int] = field(default_factory=list)
    assignments: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def num_tokens(self) -> int:
        return int(self.token_ids.shape[0])

    def matrix(self) -> np.ndarray:
        """(snapshots, tokens) array of expert indices."""
        if not self.steps:
            return np.zeros((0, self.num_tokens), dtype=np.int64)
        return np.stack(self.assignments)


def record_snapshot(history: AssignmentHistory, step: int, assignment) -> None:
    a = np.asarray(assignment, dtype=np.int64).reshape(-1)
    if history.steps and step <= history.steps[-1]:
        raise ContractError(f"snapshot step {step} is not after the last recorded step {history.steps[-1]}")
    if a.shape[0] != history.num_tokens:
        raise ContractError(f"snapshot covers {a.shape[0]} tokens, the stream has {history.num_tokens}")
    history.steps.append(int(step))
    history.assignments.append(a.copy())


def last_fluctuation_steps(history: AssignmentHistory) -> np.ndarray:
    """Per token, the last snapshot step whose expert differs from the final one (``NONE_STEP`` if never)."""
    if not history.steps:
        raise ContractError("history is empty")
    mat = history.matrix()
    differs = mat != mat[-1]
    steps = np.asarray(history.steps, dtype=np.int64)
    any_diff = differs.any(axis=0)
    # index of the last differing row per column
    last_row = mat.shape[0] - 1 - np.argmax(differs[::-1], axis=0)
    return np.where(any_diff, steps[last_row], NONE_STEP)


def last_fluctuation_step(history: AssignmentHistory, token_index: int) -> int | None:
    if not history.steps:
        raise ContractError("history is empty")
    if not 0 <= token_index < history.num_tokens:
        raise IndexError(f"token index {token_index} out of range for {history.num_tokens} tokens")
    final = history.assignments[-1][token_index]
    for step, a in zip(reversed(history.steps), reversed(history.assignments)):
        if a[token_index] != final:
            return step
    return None


@dataclass
class FluctuationReport:
    last_steps: np.ndarray
    curve: list[tuple[float, float]]
    quantiles: dict[str, float]
    total_steps: int
    fluctuating_after: dict[str, float]

    def to_json(self) -> str:
        payload = {
            "total_steps": self.total_steps,
            "num_tokens": int(self.last_steps.shape[0]),
            "never_fluctuated": float(np.mean(self.last_steps == NONE_STEP)) if self.last_steps.size else 1.0,
            "curve": [[round(x, 10), round(y, 10)] for x, y in self.curve],
            "quantiles": {k: round(v, 10) for k, v in self.quantiles.items()},
            "fluctuating_after": {k: round(v, 10) for k, v in self.fluctuating_after.items()},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def fraction_fluctuating_after(self, fraction: float) -> float:
        """Share of tokens whose last change happens after ``fraction`` of training."""
        if not self.last_steps.size:
            return 0.0
        return float(np.mean(self.last_steps > fraction * self.total_steps))


def _aggregate_by_type(history: AssignmentHistory, last: np.ndarray) -> np.ndarray:
    out = []
    for tok in np.unique(history.token_ids):
        out.append(last[history.token_ids == tok].max())
    return np.asarray(out, dtype=np.int64)


def cumulative_curve(history: AssignmentHistory, total_steps: int, by_type: bool = False) -> FluctuationReport:
    """Cumulative share of tokens whose last fluctuation step is at or before each snapshot.

    Never-fluctuating tokens count as fluctuating last at step 0, so the curve
    starts at their share. With ``by_type`` each distinct token id counts once,
    using the latest fluctuation over its occurrences.
    """
    last = last_fluctuation_steps(history)
    if by_type:
        last = _aggregate_by_type(history, last)
    effective = np.where(last == NONE_STEP, 0, last)
    xs = [0] + [s for s in history.steps if s > 0]
    if xs[-1] < total_steps:
        xs.append(total_steps)
    n = max(effective.shape[0], 1)
    curve = [(x / total_steps, float(np.sum(effective <= x)) / n) for x in xs]
    if effective.size:
        qs = np.quantile(effective / total_steps, [0.5, 0.9, 0.99])
        quantiles = {"p50": float(qs[0]), "p90": float(qs[1]), "p99": float(qs[2])}
    else:
        quantiles = {"p50": 0.0, "p90": 0.0, "p99": 0.0}
    report = FluctuationReport(last, curve, quantiles, total_steps, {})
    report.fluctuating_after = {f"{p:.2f}": report.fraction_fluctuating_after(p) for p in (0.2, 0.5, 0.8)}
    return report


def expert_token_report(assignment, token_stream, k: int, num_experts: int | None = None) -> dict[int, list[tuple[int, int]]]:
    """For each expert the ``k`` most frequent token ids routed to it, ties by lower id."""
    if k < 1:
        raise ContractError("k must be at least 1")
    a = np.asarray(assignment, dtype=np.int64).reshape(-1)
    toks = np.asarray(token_stream, dtype=np.int64).reshape(-1)
    if a.shape != toks.shape:
        raise ContractError(f"{a.shape[0]} assignments for {toks.shape[0]} tokens")
    n = num_experts if num_experts is not None else (int(a.max()) + 1 if a.size else 0)
    report = {}
    for e in range(n):
        counts = Counter(toks[a == e].tolist())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        report[e] = ranked[:k]
    return report


def write_fluctuation_log(history: AssignmentHistory, path, manifest_id: str | None = None) -> None:
    """CSV rows ``step,token_index,token_id,expert`` for every snapshot."""
    buf = io.StringIO()
    if manifest_id is not None:
        buf.write(f"# manifest_id={manifest_id}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "token_index", "token_id", "expert"])
    idx = np.arange(history.num_tokens)
    for step, a in zip(history.steps, history.assignments):
        for i, tok, e in zip(idx.tolist(), history.token_ids.tolist(), a.tolist()):
            w.writerow([step, i, tok, e])
    Path(path).write_text(buf.getvalue())


def read_fluctuation_log(path) -> AssignmentHistory:
    rows: dict[int, dict[int, int]] = {}
    token_ids: dict[int, int] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        missing = {"step", "token_index", "token_id", "expert"} - set(reader.fieldnames or [])
        if missing:
            raise ContractError(f"fluctuation log is missing columns {sorted(missing)}")
        for row in reader:
            step, i = int(row["step"]), int(row["token_index"])
            rows.setdefault(step, {})[i] = int(row["expert"])
            token_ids[i] = int(row["token_id"])
    n = len(token_ids)
    ids = np.array([token_ids[i] for i in range(n)], dtype=np.int64)
    history = AssignmentHistory(ids)
    for step in sorted(rows):
        snap = rows[step]
        if len(snap) != n:
            raise ContractError(f"snapshot at step {step} covers {len(snap)} of {n} tokens")
        record_snapshot(history, step, [snap[i] for i in range(n)])
    return history


def write_curve_csv(report: FluctuationReport, path, manifest_id: str | None = None) -> None:
    lines = [] if manifest_id is None else [f"# manifest_id={manifest_id}"]
    lines.append("fraction_of_steps,cumulative_token_fraction")
    lines += [f"{x:.10f},{y:.10f}" for x, y in report.curve]
    Path(path).write_text("\n".join(lines) + "\n")
