"""Run manifests, report artifacts and the merged router comparison."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import CorpusSplit
from .evaluation import stream_windows
from .fluctuation import expert_token_report, write_curve_csv, write_fluctuation_log
from .training import TrainConfig, TrainReport, run_two_stage

log = logging.getLogger(__name__)

ARTIFACTS = {
    "metrics": "metrics.jsonl",
    "fluctuation_log": "fluctuation.csv",
    "curve": "curve.csv",
    "experts": "experts.json",
    "summary": "summary.txt",
}
MANIFEST_FILE = "manifest.json"

COMPARE_RUNS = (
    ("stablemoe", {"router": "stablemoe"}),
    ("switch", {"router": "switch"}),
    ("base", {"router": "base"}),
    ("hash", {"router": "hash"}),
    ("stablemoe-stage1-only", {"router": "stablemoe", "two_stage": False}),
    ("dense", {"router": "dense"}),
)


def code_hash() -> str:
    """Content hash of the package sources, standing in for a binary hash."""
    h = hashlib.sha256()
    for src in sorted(Path(__file__).parent.glob("*.py")):
        h.update(src.name.encode())
        h.update(src.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    seed: int
    corpus_hash: str
    corpus_source: str
    code_hash: str
    outputs: dict = field(default_factory=lambda: dict(ARTIFACTS))
    manifest_id: str = ""

    def __post_init__(self):
        if not self.manifest_id:
            key = json.dumps(
                {"config": self.config, "seed": self.seed, "corpus": self.corpus_hash, "code": self.code_hash},
                sort_keys=True,
            )
            self.manifest_id = hashlib.sha256(key.encode()).hexdigest()[:16]

    @classmethod
    def for_run(cls, cfg: TrainConfig, corpus: CorpusSplit) -> "RunManifest":
        return cls(cfg.to_dict(), cfg.seed, corpus.content_hash, Path(corpus.source).name, code_hash())

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def summary_rows(name: str, report: TrainReport) -> dict:
    fl = report.fluctuation
    return {
        "run": name,
        "router": report.config.router,
        "two_stage": report.config.uses_two_stages,
        "valid_ppl": report.final_valid_ppl,
        "test_ppl": report.test_ppl,
        "balance_ratio": report.balance_ratio,
        "fluct_after_20pct": fl.fraction_fluctuating_after(0.2) if fl is not None else None,
        "agreement_at_freeze": report.agreement_at_freeze,
        "freeze_step": report.freeze_step,
    }


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_table(rows: list[dict], header: str | None = None) -> str:
    cols = list(rows[0]) if rows else []
    cells = [[_cell(r[c]) for c in cols] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(cols)]
    lines = [header] if header else []
    lines.append("  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip())
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines) + "\n"


def emit_reports(report: TrainReport, corpus: CorpusSplit, out_dir, top_k: int = 10, name: str | None = None) -> RunManifest:
    """Write the five run artifacts plus the manifest they all point at."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.for_run(report.config, corpus)
    mid = manifest.manifest_id

    lines = [json.dumps({"manifest_id": mid, **rec}) for rec in report.metrics]
    (out / ARTIFACTS["metrics"]).write_text("".join(line + "\n" for line in lines))

    if report.history is not None and len(report.history):
        write_fluctuation_log(report.history, out / ARTIFACTS["fluctuation_log"], manifest_id=mid)
    else:
        (out / ARTIFACTS["fluctuation_log"]).write_text(f"# manifest_id={mid}\nstep,token_index,token_id,expert\n")
    if report.fluctuation is not None:
        write_curve_csv(report.fluctuation, out / ARTIFACTS["curve"], manifest_id=mid)
    else:
        (out / ARTIFACTS["curve"]).write_text(f"# manifest_id={mid}\nfraction_of_steps,cumulative_token_fraction\n")

    experts = {}
    if report.model is not None and report.model.has_moe and report.final_assignment.size:
        valid_tokens = _valid_input_tokens(report, corpus)
        rep = expert_token_report(report.final_assignment, valid_tokens, top_k, report.config.num_experts)
        experts = {str(e): [[tok, cnt] for tok, cnt in items] for e, items in rep.items()}
    payload = {"manifest_id": mid, "top_k": top_k, "experts": experts}
    (out / ARTIFACTS["experts"]).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    table = format_table([summary_rows(name or report.config.router, report)], header=f"manifest_id {mid}")
    (out / ARTIFACTS["summary"]).write_text(table)
    (out / MANIFEST_FILE).write_text(manifest.to_json())
    return manifest


def _valid_input_tokens(report: TrainReport, corpus: CorpusSplit) -> np.ndarray:
    inputs, _ = stream_windows(corpus.valid, report.config.seq_len)
    return np.concatenate([x.reshape(-1) for x in inputs])


def run_compare(cfg: TrainConfig, corpus: CorpusSplit, out_dir, runs=COMPARE_RUNS, top_k: int = 10) -> list[dict]:
    """Train every router variant on the same seed and config; write one merged summary."""
    out = Path(out_dir)
    rows = []
    manifests = {}
    for name, overrides in runs:
        log.info("compare: training %s", name)
        run_cfg = cfg.replace(**overrides)
        report = run_two_stage(run_cfg, corpus, out_dir=out / name)
        manifests[name] = emit_reports(report, corpus, out / name, top_k=top_k, name=name).manifest_id
        rows.append(summary_rows(name, report))
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.txt").write_text(format_table(rows))
    merged = {"runs": [{**r, "manifest_id": manifests[r["run"]]} for r in rows]}
    (out / "compare.json").write_text(json.dumps(merged, indent=2, sort_keys=True) + "\n")
    return rows
