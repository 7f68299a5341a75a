"""scikit-learn style wrapper around a single training run.

The estimator treats one byte stream as the dataset: ``fit`` splits it and
trains, ``predict`` gives the inference-time expert of every token,
``transform`` the same as one-hot rows, and ``score`` the negated perplexity
(higher is better, as scikit-learn expects).
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .corpus import split_tokens, tokenize
from .evaluation import evaluate_ppl
from .exceptions import ContractError
from .training import TrainConfig, Trainer


def as_token_stream(X) -> np.ndarray:
    """Accept text, bytes, a file path or an integer array."""
    if isinstance(X, Path):
        X = X.read_bytes()
    if isinstance(X, (str, bytes)):
        return tokenize(X)
    ids = np.asarray(X, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() > 255):
        raise ContractError("token ids must be bytes (0-255)")
    return ids


class StableMoELM(BaseEstimator):
    def __init__(
        self,
        router="stablemoe",
        two_stage=True,
        total_steps=2000,
        stage1_fraction=0.1,
        batch_tokens=1024,
        seq_len=64,
        lr_max=5e-3,
        warmup_steps=100,
        alpha=0.3,
        num_experts=8,
        router_dim=50,
        hidden_dim=64,
        num_blocks=2,
        num_heads=4,
        ffn_inner_dim=256,
        snapshot_interval=50,
        valid_stream_tokens=4096,
        split_fractions=(0.9, 0.05, 0.05),
        seed=0,
    ):
        self.router = router
        self.two_stage = two_stage
        self.total_steps = total_steps
        self.stage1_fraction = stage1_fraction
        self.batch_tokens = batch_tokens
        self.seq_len = seq_len
        self.lr_max = lr_max
        self.warmup_steps = warmup_steps
        self.alpha = alpha
        self.num_experts = num_experts
        self.router_dim = router_dim
        self.hidden_dim = hidden_dim
        self.num_blocks = num_blocks
        self.num_heads = num_heads
        self.ffn_inner_dim = ffn_inner_dim
        self.snapshot_interval = snapshot_interval
        self.valid_stream_tokens = valid_stream_tokens
        self.split_fractions = split_fractions
        self.seed = seed

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X, y=None, out_dir=None):
        """Train on a byte stream; ``y`` is ignored because targets are the next bytes."""
        cfg = self.train_config()
        corpus = split_tokens(as_token_stream(X), cfg.split_fractions, cfg.seed)
        trainer = Trainer(cfg, corpus, out_dir=out_dir).run()
        self.report_ = trainer.report()
        self.model_ = trainer.model
        self.corpus_ = corpus
        self.freeze_step_ = self.report_.freeze_step
        return self

    def predict(self, X) -> np.ndarray:
        """Expert index per token under inference routing."""
        check_is_fitted(self, "model_")
        if not self.model_.has_moe:
            raise ContractError("a dense model routes nothing")
        ids = as_token_stream(X)
        if ids.size == 0:
            return np.zeros(0, dtype=np.int64)
        chunks = [ids[i : i + self.seq_len] for i in range(0, ids.size, self.seq_len)]
        return np.concatenate([self.model_.eval_assignment(c) for c in chunks])

    def transform(self, X) -> np.ndarray:
        a = self.predict(X)
        return np.eye(self.num_experts, dtype=np.float32)[a]

    def score(self, X, y=None) -> float:
        """Negated perplexity on the stream."""
        check_is_fitted(self, "model_")
        return -evaluate_ppl(self.model_, as_token_stream(X), self.seq_len)
