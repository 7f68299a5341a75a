"""Tiny decoder-only transformer used as the backbone around the MoE layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ContractError
from .nn import FeedForward, LayerNorm, Linear, Module, normal_init
from .tensor import Parameter, Tensor


@dataclass
class BackboneConfig:
    vocab_size: int = 256
    hidden_dim: int = 128
    num_blocks: int = 4
    num_heads: int = 4
    ffn_inner_dim: int = 512
    max_seq_len: int = 128
    moe_insert_after_block: int | None = None
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.moe_insert_after_block is None:
            self.moe_insert_after_block = max(1, self.num_blocks // 2)
        if self.hidden_dim % self.num_heads:
            raise ContractError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if not 1 <= self.moe_insert_after_block <= self.num_blocks:
            raise ContractError(f"moe_insert_after_block must lie in [1, {self.num_blocks}]")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


def as_batch(tokens) -> np.ndarray:
    """Token ids as a (B, T) int64 array; a 1-D sequence becomes a batch of one."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ContractError(f"token ids must be 1-D or 2-D, got shape {ids.shape}")
    return ids


class CausalSelfAttention(Module):
    def __init__(self, rng: np.random.Generator, cfg: BackboneConfig):
        d = cfg.hidden_dim
        self.num_heads = cfg.num_heads
        self.query = Linear(rng, d, d)
        self.key = Linear(rng, d, d)
        self.value = Linear(rng, d, d)
        self.out = Linear(rng, d, d, zero=True)

    def __call__(self, x: Tensor, batch: int, seq: int) -> Tensor:
        d = x.shape[1]
        h = self.num_heads
        dh = d // h

        def heads(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (batch, seq, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(self.query(x)), heads(self.key(x)), heads(self.value(x))
        att = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        mixed = T.matmul(T.causal_softmax(att), v)
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (batch * seq, d))
        return self.out(merged)


class TransformerBlock(Module):
    """Pre-norm block: ``h + Att(LN(h))`` followed by ``+ FFN(LN(.))``."""

    def __init__(self, rng: np.random.Generator, cfg: BackboneConfig):
        self.attn_norm = LayerNorm(cfg.hidden_dim)
        self.attn = CausalSelfAttention(rng, cfg)
        self.ffn = FeedForward(rng, cfg.hidden_dim, cfg.ffn_inner_dim)

    def __call__(self, h: Tensor, batch: int, seq: int) -> Tensor:
        u = T.add(h, self.attn(self.attn_norm(h), batch, seq))
        return T.add(u, self.ffn(u))


class Backbone(Module):
    """Embeddings, transformer blocks, final norm and (tied) output projection."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.token_embedding = Parameter(normal_init(rng, (cfg.vocab_size, cfg.hidden_dim)))
        self.position_embedding = Parameter(normal_init(rng, (cfg.max_seq_len, cfg.hidden_dim)))
        self.blocks = [TransformerBlock(rng, cfg) for _ in range(cfg.num_blocks)]
        self.final_norm = LayerNorm(cfg.hidden_dim)
        if not cfg.tie_embeddings:
            self.output = Parameter(normal_init(rng, (cfg.hidden_dim, cfg.vocab_size)))

    def embed(self, tokens) -> Tensor:
        """Token plus positional embeddings, flattened to (B*T, d)."""
        ids = as_batch(tokens)
        b, t = ids.shape
        if t < 1:
            raise ContractError("embed needs at least one token")
        if t > self.cfg.max_seq_len:
            raise ContractError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise IndexError(f"token id out of range for vocab of {self.cfg.vocab_size}")
        tok = T.take_rows(self.token_embedding, ids.reshape(-1), op="embedding")
        pos = T.take_rows(self.position_embedding, np.tile(np.arange(t), b), op="embedding")
        return T.add(tok, pos)

    def output_weight(self) -> Tensor:
        if self.cfg.tie_embeddings:
            return T.transpose(self.token_embedding, (1, 0))
        return self.output

    def logits(self, hidden: Tensor) -> Tensor:
        return T.matmul(self.final_norm(hidden), self.output_weight())

    def lm_loss(self, hidden: Tensor, targets, reduction: str = "mean") -> Tensor:
        return lm_loss(self.logits(hidden), targets, reduction)


def lm_loss(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Next-token cross-entropy (mean or sum over positions); ``logits`` rows align with ``targets``."""
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or tgt.shape[0] != logits.shape[0]:
        raise ContractError(f"{tgt.shape[0]} targets for {logits.shape[0]} positions")
    return T.softmax_cross_entropy(logits, tgt, reduction=reduction, op="task_loss")
