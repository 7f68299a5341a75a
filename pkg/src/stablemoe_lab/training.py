"""Two-stage training: Adam, schedule, clipping, distill-then-freeze, snapshots, checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig
from .corpus import CorpusSplit
from .evaluation import evaluate_stream
from .exceptions import ContractError, IntegrityError
from .fluctuation import AssignmentHistory, FluctuationReport, cumulative_curve, record_snapshot
from .model import ROUTER_KINDS, ModelConfig, MoELanguageModel
from .moe import balance_stats
from .routers import export_router, freeze_router

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    router: str = "stablemoe"
    two_stage: bool = True
    total_steps: int = 2000
    stage1_fraction: float = 0.10
    batch_tokens: int = 8192
    seq_len: int = 128
    lr_max: float = 5e-3
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    grad_clip_norm: float = 0.1
    alpha: float = 0.3
    router_dim: int = 50
    seed: int = 0
    snapshot_interval: int = 50
    vocab_size: int = 256
    hidden_dim: int = 128
    num_blocks: int = 4
    num_heads: int = 4
    ffn_inner_dim: int = 512
    moe_insert_after_block: int | None = None
    tie_embeddings: bool = True
    num_experts: int = 8
    sublayers_per_expert: int = 2
    expert_inner_dim: int | None = None
    auction_eps_ratio: float = 1e-3
    hash_seed: int | None = None
    valid_stream_tokens: int = 8192
    split_fractions: tuple[float, float, float] = (0.9, 0.05, 0.05)
    deterministic: bool = True

    def __post_init__(self):
        self.split_fractions = tuple(self.split_fractions)
        if self.router not in ROUTER_KINDS:
            raise ContractError(f"unknown router {self.router!r}; choose from {ROUTER_KINDS}")
        if not 0.0 < self.stage1_fraction < 1.0:
            raise ContractError("stage1_fraction must lie strictly between 0 and 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ContractError("warmup_steps must be smaller than total_steps")
        if self.batch_tokens < self.seq_len:
            raise ContractError("batch_tokens must cover at least one sequence")
        if self.snapshot_interval < 1:
            raise ContractError("snapshot_interval must be positive")
        if self.grad_clip_norm <= 0:
            raise ContractError("grad_clip_norm must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @property
    def batch_size(self) -> int:
        return self.batch_tokens // self.seq_len

    @property
    def stage1_steps(self) -> int:
        return int(round(self.stage1_fraction * self.total_steps))

    @property
    def uses_two_stages(self) -> bool:
        return self.router == "stablemoe" and self.two_stage

    def model_config(self) -> ModelConfig:
        backbone = BackboneConfig(
            vocab_size=self.vocab_size,
            hidden_dim=self.hidden_dim,
            num_blocks=self.num_blocks,
            num_heads=self.num_heads,
            ffn_inner_dim=self.ffn_inner_dim,
            max_seq_len=self.seq_len,
            moe_insert_after_block=self.moe_insert_after_block,
            tie_embeddings=self.tie_embeddings,
        )
        return ModelConfig(
            backbone=backbone,
            router=self.router,
            num_experts=self.num_experts,
            sublayers_per_expert=self.sublayers_per_expert,
            expert_inner_dim=self.expert_inner_dim,
            router_dim=self.router_dim,
            alpha=self.alpha,
            auction_eps_ratio=self.auction_eps_ratio,
            hash_seed=self.seed if self.hash_seed is None else self.hash_seed,
        )


# optimisation ---------------------------------------------------------------


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p, dtype=np.float32) for p in params], [np.zeros_like(p, dtype=np.float32) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8) -> None:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if p.shape != g.shape or m.shape != p.shape:
            raise ContractError(f"parameter {p.shape} / gradient {g.shape} / moment {m.shape} mismatch")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_max`` then linear decay to zero at ``total_steps``."""
    if step > cfg.total_steps:
        raise ContractError(f"step {step} beyond total_steps {cfg.total_steps}")
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    return cfg.lr_max * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None))


def clip_gradients(grads: list[np.ndarray | None], max_norm: float) -> tuple[list[np.ndarray | None], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, norm before clipping)."""
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    factor = max_norm / norm
    return [None if g is None else (g * factor).astype(g.dtype) for g in grads], norm


# data -----------------------------------------------------------------------


def sample_batch(stream: np.ndarray, batch_size: int, seq_len: int, seed: int, step: int) -> tuple[np.ndarray, np.ndarray]:
    """Random windows; the draw depends only on (seed, step) so resumed runs see identical data."""
    if stream.shape[0] < seq_len + 1:
        raise ContractError(f"training stream of {stream.shape[0]} tokens is shorter than one sequence")
    rng = np.random.default_rng([seed, step])
    starts = rng.integers(0, stream.shape[0] - seq_len, size=batch_size)
    windows = stream[starts[:, None] + np.arange(seq_len + 1)]
    return windows[:, :-1], windows[:, 1:]


# training -------------------------------------------------------------------


@dataclass
class TrainReport:
    config: TrainConfig
    metrics: list[dict]
    loss_trace: list[float]
    history: AssignmentHistory | None
    freeze_step: int | None
    agreement_at_freeze: float | None
    router_checksum: str | None
    final_valid_ppl: float
    test_ppl: float | None
    final_assignment: np.ndarray
    fluctuation: FluctuationReport | None
    balance_ratio: float | None
    router_checksums: list[str] = field(default_factory=list)
    model: MoELanguageModel = field(repr=False, default=None)


def _stage(cfg: TrainConfig, model: MoELanguageModel) -> int:
    if cfg.router == "stablemoe" and model.router.is_frozen:
        return 2
    return 1


class Trainer:
    """Owns the model, optimizer and assignment history of one run."""

    def __init__(self, cfg: TrainConfig, corpus: CorpusSplit, out_dir=None):
        self.cfg = cfg
        self.corpus = corpus
        self.out_dir = Path(out_dir) if out_dir is not None else None
        T.set_deterministic(cfg.deterministic)
        if corpus.train.shape[0] < cfg.seq_len + 1:
            raise ContractError("corpus too small for one training batch")
        self.model = MoELanguageModel(cfg.model_config(), seed=cfg.seed)
        self.params = self.model.parameters()
        self.opt = OptimizerState.fresh([p.values for p in self.params])
        self.step = 0
        self.metrics: list[dict] = []
        self.loss_trace: list[float] = []
        self.pending_losses: list[float] = []
        stream = self._valid_stream_inputs()
        self.history = AssignmentHistory(stream, cfg.snapshot_interval) if self.model.has_moe else None
        self.freeze_step: int | None = None
        self.agreement_at_freeze: float | None = None
        self.router_checksums: list[str] = []

    # -- schedule helpers

    @property
    def boundary(self) -> int | None:
        return self.cfg.stage1_steps if self.cfg.uses_two_stages else None

    def _valid_stream_inputs(self) -> np.ndarray:
        from .evaluation import stream_windows

        inputs, _ = stream_windows(self.corpus.valid, self.cfg.seq_len, self.cfg.valid_stream_tokens)
        return np.concatenate([x.reshape(-1) for x in inputs])

    def _is_eval_step(self, step: int) -> bool:
        return step % self.cfg.snapshot_interval == 0 or step == self.cfg.total_steps or step == self.boundary

    # -- core

    def train_step(self) -> dict:
        cfg = self.cfg
        if self.boundary is not None and self.step == self.boundary and not self.model.router.is_frozen:
            self.freeze()
        xb, yb = sample_batch(self.corpus.train, cfg.batch_size, cfg.seq_len, cfg.seed, self.step)
        self.model.zero_grad()
        loss, parts, _ = self.model.loss(xb, yb)
        loss.backward()
        grads = [p.grad if p.requires_grad else None for p in self.params]
        grads, norm = clip_gradients(grads, cfg.grad_clip_norm)
        lr = lr_schedule(self.step, cfg)
        adam_step([p.values for p in self.params], grads, self.opt, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.step += 1
        parts.update(lr=lr, grad_norm=norm)
        self.loss_trace.append(parts["total"])
        self.pending_losses.append(parts["total"])
        if self._is_eval_step(self.step):
            self.evaluate()
        return parts

    def freeze(self) -> None:
        """Measure distillation agreement on held-out tokens, then freeze and export the router."""
        ev = evaluate_stream(self.model, self.corpus.valid, self.cfg.seq_len, self.cfg.valid_stream_tokens)
        self.agreement_at_freeze = ev.agreement
        freeze_router(self.model.router)
        self.freeze_step = self.step
        log.info("froze distilled router at step %d (agreement %.3f)", self.step, ev.agreement)
        if self.out_dir is not None:
            export_router(self.model.router, self.out_dir / "router")

    def evaluate(self) -> dict:
        cfg = self.cfg
        stage = _stage(cfg, self.model)
        if stage == 2:
            self.model.router.verify()
            self.router_checksums.append(self.model.router.checksum())
        ev = evaluate_stream(self.model, self.corpus.valid, cfg.seq_len, cfg.valid_stream_tokens)
        rec = {
            "step": self.step,
            "stage": stage,
            "train_loss": float(np.mean(self.pending_losses)) if self.pending_losses else None,
            "valid_ppl": ev.ppl,
            "balance_ratio": balance_stats(ev.assignment, cfg.num_experts).max_mean_ratio if self.model.has_moe else None,
            "router_agreement": ev.agreement,
            "lr": lr_schedule(self.step, cfg),
        }
        self.pending_losses = []
        self.metrics.append(rec)
        if self.history is not None:
            record_snapshot(self.history, self.step, ev.assignment)
        return rec

    def run(self, until: int | None = None) -> "Trainer":
        stop = self.cfg.total_steps if until is None else min(until, self.cfg.total_steps)
        while self.step < stop:
            self.train_step()
        return self

    def report(self) -> TrainReport:
        cfg = self.cfg
        final = evaluate_stream(self.model, self.corpus.valid, cfg.seq_len)
        test_ppl = evaluate_stream(self.model, self.corpus.test, cfg.seq_len).ppl if self.corpus.test.shape[0] >= 2 else None
        fluct = cumulative_curve(self.history, cfg.total_steps) if self.history is not None and len(self.history) else None
        checksum = self.model.router.checksum() if cfg.router == "stablemoe" and self.model.router.is_frozen else None
        return TrainReport(
            config=cfg,
            metrics=list(self.metrics),
            loss_trace=list(self.loss_trace),
            history=self.history,
            freeze_step=self.freeze_step,
            agreement_at_freeze=self.agreement_at_freeze,
            router_checksum=checksum,
            final_valid_ppl=final.ppl,
            test_ppl=test_ppl,
            final_assignment=final.assignment,
            fluctuation=fluct,
            balance_ratio=balance_stats(final.assignment, cfg.num_experts).max_mean_ratio if self.model.has_moe else None,
            router_checksums=list(self.router_checksums),
            model=self.model,
        )

    # -- checkpoints

    def save_checkpoint(self, path) -> Path:
        return save_checkpoint(self, path)

    @classmethod
    def load_checkpoint(cls, path, corpus: CorpusSplit, out_dir=None) -> "Trainer":
        return load_checkpoint(path, corpus, out_dir)


def run_two_stage(cfg: TrainConfig, corpus: CorpusSplit, out_dir=None) -> TrainReport:
    """Stage 1 (learn routing, distill) until the boundary, freeze, then stage 2 to the end."""
    trainer = Trainer(cfg, corpus, out_dir)
    trainer.run()
    return trainer.report()


# checkpoint files -------------------------------------------------------------


def _arrays_digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(trainer: Trainer, path) -> Path:
    """Write model, optimizer, history and bookkeeping into one ``.npz`` with a content digest."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, p in trainer.model.named_parameters():
        arrays[f"param/{name}"] = p.values
    for i, (m, v) in enumerate(zip(trainer.opt.m, trainer.opt.v)):
        arrays[f"adam_m/{i}"] = m
        arrays[f"adam_v/{i}"] = v
    if trainer.history is not None and len(trainer.history):
        arrays["history/assignments"] = trainer.history.matrix()
        arrays["history/steps"] = np.asarray(trainer.history.steps, dtype=np.int64)
    router = trainer.model.router if trainer.cfg.router == "stablemoe" else None
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": trainer.cfg.to_dict(),
        "step": trainer.step,
        "adam_step": trainer.opt.step,
        "stage": _stage(trainer.cfg, trainer.model),
        "rng": {"scheme": "per-step", "seed": trainer.cfg.seed, "next_step": trainer.step},
        "router_frozen": bool(router is not None and router.is_frozen),
        "router_checksum": router.frozen_checksum if router is not None else None,
        "freeze_step": trainer.freeze_step,
        "agreement_at_freeze": trainer.agreement_at_freeze,
        "metrics": trainer.metrics,
        "loss_trace": trainer.loss_trace,
        "pending_losses": trainer.pending_losses,
        "router_checksums": trainer.router_checksums,
        "corpus_hash": trainer.corpus.content_hash,
    }
    meta["digest"] = _arrays_digest(arrays)
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Load and verify a checkpoint file; returns (meta, arrays)."""
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise
    except Exception as exc:  # zip/npy decoding errors
        raise IntegrityError(f"unreadable checkpoint {path}: {exc}") from exc
    if "__meta__" not in arrays:
        raise IntegrityError("checkpoint has no metadata")
    try:
        meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    except ValueError as exc:
        raise IntegrityError(f"corrupt checkpoint metadata: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {meta.get('version')!r}")
    if _arrays_digest(arrays) != meta.get("digest"):
        raise IntegrityError("checkpoint content digest mismatch")
    return meta, arrays


def load_checkpoint(path, corpus: CorpusSplit, out_dir=None) -> Trainer:
    meta, arrays = read_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    trainer = Trainer(cfg, corpus, out_dir)
    state = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    trainer.model.load_state_dict(state)
    n = len(trainer.params)
    trainer.opt = OptimizerState([arrays[f"adam_m/{i}"].copy() for i in range(n)],
                                 [arrays[f"adam_v/{i}"].copy() for i in range(n)], meta["adam_step"])
    trainer.step = meta["step"]
    trainer.metrics = meta["metrics"]
    trainer.loss_trace = meta["loss_trace"]
    trainer.pending_losses = meta["pending_losses"]
    trainer.router_checksums = meta["router_checksums"]
    trainer.freeze_step = meta["freeze_step"]
    trainer.agreement_at_freeze = meta["agreement_at_freeze"]
    if trainer.history is not None and "history/steps" in arrays:
        for step, a in zip(arrays["history/steps"].tolist(), arrays["history/assignments"]):
            record_snapshot(trainer.history, step, a)
    if meta["router_frozen"]:
        router = trainer.model.router
        freeze_router(router)
        if router.frozen_checksum != meta["router_checksum"]:
            raise IntegrityError("frozen router checksum does not match the checkpoint record")
    return trainer


def load_model(path) -> tuple[TrainConfig, MoELanguageModel]:
    """Model only, for evaluation and reports."""
    meta, arrays = read_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    T.set_deterministic(cfg.deterministic)
    model = MoELanguageModel(cfg.model_config(), seed=cfg.seed)
    model.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    if meta["router_frozen"]:
        freeze_router(model.router)
        if model.router.frozen_checksum != meta["router_checksum"]:
            raise IntegrityError("frozen router checksum does not match the checkpoint record")
    return cfg, model
