"""Inference-mode passes over token streams: perplexity, routing and agreement."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ContractError
from .model import MoELanguageModel
from .moe import assignment_scores, greedy_assign


def stream_windows(stream, seq_len: int, max_tokens: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping (inputs, targets) windows of ``seq_len`` over a token stream."""
    ids = np.asarray(stream, dtype=np.int64)
    if max_tokens is not None:
        ids = ids[: max_tokens + 1]
    if ids.shape[0] < 2:
        raise ContractError("need at least two tokens to score next-token prediction")
    usable = ids.shape[0] - 1
    n_full = usable // seq_len
    inputs, targets = [], []
    if n_full:
        inputs.append(ids[: n_full * seq_len].reshape(n_full, seq_len))
        targets.append(ids[1 : n_full * seq_len + 1].reshape(n_full, seq_len))
    rest = usable - n_full * seq_len
    if rest:
        inputs.append(ids[n_full * seq_len : usable][None, :])
        targets.append(ids[n_full * seq_len + 1 : usable + 1][None, :])
    return inputs, targets


@dataclass
class StreamEval:
    mean_loss: float
    ppl: float
    assignment: np.ndarray
    tokens: np.ndarray
    agreement: float | None


def evaluate_stream(model: MoELanguageModel, stream, seq_len: int, max_tokens: int | None = None, batch_windows: int = 64) -> StreamEval:
    """One inference pass: perplexity, expert per input token and distilled-router agreement."""
    inputs, targets = stream_windows(stream, seq_len, max_tokens)
    total, count = 0.0, 0
    assign, toks, agree_hits = [], [], 0
    want_agreement = model.cfg.router == "stablemoe"
    with T.no_grad():
        for xin, xt in zip(inputs, targets):
            for lo in range(0, xin.shape[0], batch_windows):
                xb, tb = xin[lo : lo + batch_windows], xt[lo : lo + batch_windows]
                res = model.forward(xb, training=False)
                loss = model.backbone.lm_loss(res.hidden, tb).item()
                total += loss * tb.size
                count += tb.size
                toks.append(xb.reshape(-1))
                if res.decision is not None:
                    assign.append(res.decision.assignment)
                    if want_agreement:
                        x = model.route_norm(res.moe_input)
                        teacher = greedy_assign(assignment_scores(x, model.centroids))
                        agree_hits += int(np.sum(teacher == model.router.route(res.tokens)))
    mean = total / count
    assignment = np.concatenate(assign) if assign else np.zeros(0, dtype=np.int64)
    tokens = np.concatenate(toks)
    agreement = agree_hits / tokens.shape[0] if want_agreement else None
    return StreamEval(mean, math.exp(mean), assignment, tokens, agreement)


def evaluate_ppl(model: MoELanguageModel, stream, seq_len: int | None = None, max_tokens: int | None = None) -> float:
    """exp(mean next-token cross-entropy) over ``stream`` with inference-time routing."""
    seq_len = seq_len or model.cfg.backbone.max_seq_len
    return evaluate_stream(model, stream, seq_len, max_tokens).ppl
