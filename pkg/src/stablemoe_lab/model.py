"""Backbone with one MoE layer inserted after a middle block, wired to a router kind."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, as_batch
from .exceptions import ContractError
from .moe import (
    ExpertBank,
    ExpertCentroids,
    RoutingDecision,
    assignment_scores,
    balance_loss,
    greedy_route,
    moe_forward,
    sigmoid_decision,
    stage1_loss,
    stage2_forward,
    stage2_loss,
)
from .nn import LayerNorm, Module
from .routers import (
    DistilledRouter,
    auction_route,
    build_hash_table,
    distillation_loss,
    hash_route,
    switch_route,
)
from .tensor import Tensor

ROUTER_KINDS = ("stablemoe", "switch", "base", "hash", "dense")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    router: str = "stablemoe"
    num_experts: int = 8
    sublayers_per_expert: int = 2
    expert_inner_dim: int | None = None
    router_dim: int = 50
    alpha: float = 0.3
    auction_eps_ratio: float = 1e-3
    hash_seed: int = 0

    def __post_init__(self):
        if self.router not in ROUTER_KINDS:
            raise ContractError(f"unknown router kind {self.router!r}; choose from {ROUTER_KINDS}")
        if self.expert_inner_dim is None:
            self.expert_inner_dim = self.backbone.ffn_inner_dim


@dataclass
class ForwardResult:
    hidden: Tensor
    decision: RoutingDecision | None = None
    moe_input: Tensor | None = None
    route_input: Tensor | None = None
    tokens: np.ndarray | None = None


class MoELanguageModel(Module):
    """Decoder-only LM; ``router="dense"`` drops the MoE layer entirely."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        bcfg = cfg.backbone
        self.backbone = Backbone(bcfg, rng)
        self.has_moe = cfg.router != "dense"
        if self.has_moe:
            self.route_norm = LayerNorm(bcfg.hidden_dim)
            self.centroids = ExpertCentroids(rng, cfg.num_experts, bcfg.hidden_dim)
            self.experts = ExpertBank(rng, cfg.num_experts, bcfg.hidden_dim, cfg.expert_inner_dim, cfg.sublayers_per_expert)
        if cfg.router == "stablemoe":
            self.router = DistilledRouter(rng, bcfg.vocab_size, cfg.num_experts, cfg.router_dim, seed=seed)
        if cfg.router == "hash":
            self.hash_table = build_hash_table(bcfg.vocab_size, cfg.num_experts, cfg.hash_seed)

    @property
    def frozen(self) -> bool:
        return self.cfg.router == "stablemoe" and self.router.is_frozen

    def route(self, h_in: Tensor, tokens: np.ndarray, training: bool, forced: np.ndarray | None = None):
        """Routing decision for the MoE layer input ``h_in``; returns (decision, route_input).

        ``forced`` pins the expert per token (used by gradient checks) while the
        gate keeps the functional form of the configured router.
        """
        x = self.route_norm(h_in)
        scores = assignment_scores(x, self.centroids)
        kind = self.cfg.router
        if kind == "hash":
            return hash_route(tokens, self.hash_table, scores), x
        if kind == "switch":
            if forced is None:
                return switch_route(scores), x
            return RoutingDecision(scores, forced, T.pick(T.softmax(scores), forced), "switch"), x
        if forced is not None:
            source = "distilled-frozen" if self.frozen else ("auction" if kind == "base" else "stage1-greedy")
            return sigmoid_decision(scores, forced, source), x
        if kind == "stablemoe":
            if self.router.is_frozen:
                return sigmoid_decision(scores, self.router.route(tokens), "distilled-frozen"), x
            return greedy_route(scores), x
        if kind == "base":
            if training:
                return auction_route(scores, epsilon_ratio=self.cfg.auction_eps_ratio), x
            return sigmoid_decision(scores, greedy_route(scores).assignment, "auction"), x
        raise ContractError(f"router kind {kind!r} has no routing")

    def forward(self, tokens, training: bool = True, forced_assignment=None) -> ForwardResult:
        ids = as_batch(tokens)
        b, t = ids.shape
        flat = ids.reshape(-1)
        h = self.backbone.embed(ids)
        insert = self.cfg.backbone.moe_insert_after_block
        result = ForwardResult(hidden=h, tokens=flat)
        for i, block in enumerate(self.backbone.blocks):
            h = block(h, b, t)
            if self.has_moe and i + 1 == insert:
                result.moe_input = h
                if self.frozen and forced_assignment is None:
                    h, decision = stage2_forward(
                        h, self.router, self.centroids, self.experts, flat, score_input=self.route_norm(h)
                    )
                    result.route_input = None
                else:
                    decision, result.route_input = self.route(h, flat, training, forced_assignment)
                    h = moe_forward(h, decision, self.experts)
                result.decision = decision
        result.hidden = h
        return result

    def logits(self, tokens, training: bool = False) -> Tensor:
        return self.backbone.logits(self.forward(tokens, training=training).hidden)

    def loss(self, inputs, targets, forced_assignment=None) -> tuple[Tensor, dict[str, float], ForwardResult]:
        """Training objective for the current stage and router kind.

        StableMoE before freezing: task + balance + distillation. After freezing:
        task only. Switch: task + balance. BASE, hash and dense: task only.
        The task and distillation terms are summed over tokens so the balance
        term keeps its per-batch scale relative to them; ``parts`` reports every
        term divided by the token count.
        """
        res = self.forward(inputs, training=True, forced_assignment=forced_assignment)
        n = res.tokens.shape[0]
        task = self.backbone.lm_loss(res.hidden, targets, reduction="sum")
        parts = {"task": task.item() / n}
        kind = self.cfg.router
        if kind == "stablemoe" and not self.router.is_frozen:
            bal = balance_loss(res.decision, self.cfg.alpha, self.cfg.num_experts)
            distilled = self.router.scores(res.tokens)
            dis = distillation_loss(distilled, res.decision.assignment, reduction="sum")
            total = stage1_loss(task, bal, dis)
            parts.update(balance=bal.item() / n, distill=dis.item() / n)
        elif kind == "stablemoe":
            total = stage2_loss(task)
        elif kind == "switch":
            bal = balance_loss(res.decision, self.cfg.alpha, self.cfg.num_experts)
            total = T.sum_scalars(task, bal, op="switch_loss")
            parts.update(balance=bal.item() / n)
        else:
            total = T.identity(task, op="task_only_loss")
        parts["total"] = total.item() / n
        return total, parts, res

    def eval_assignment(self, tokens) -> np.ndarray:
        """Inference-time expert per token (flattened), or empty for dense models."""
        if not self.has_moe:
            return np.zeros(0, dtype=np.int64)
        with T.no_grad():
            return self.forward(tokens, training=False).decision.assignment
