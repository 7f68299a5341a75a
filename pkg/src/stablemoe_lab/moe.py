"""MoE sublayer: affinity scores, top-1 routing, sigmoid-gated experts and the routing losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import tensor as T
from .exceptions import ContractError, DimensionError
from .nn import FeedForward, Module, normal_init
from .tensor import Parameter, Tensor

if TYPE_CHECKING:
    from .routers import DistilledRouter

SOURCES = ("stage1-greedy", "distilled-frozen", "switch", "auction", "hash")


@dataclass
class RoutingDecision:
    """Per-token routing: affinity scores, chosen expert, gate value and who decided."""

    scores: Tensor | None
    assignment: np.ndarray
    gate: Tensor
    source: str

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.source not in SOURCES:
            raise ContractError(f"unknown routing source {self.source!r}")

    @property
    def num_tokens(self) -> int:
        return int(self.assignment.shape[0])


@dataclass
class BalanceStats:
    loads: np.ndarray
    mean_load: float
    max_mean_ratio: float


class Expert(Module):
    """A stack of pre-norm FFN sublayers; returns the accumulated residual update."""

    def __init__(self, rng: np.random.Generator, d: int, inner: int, sublayers: int):
        self.sublayers = [FeedForward(rng, d, inner) for _ in range(sublayers)]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for sub in self.sublayers:
            h = T.add(h, sub(h))
        return T.sub(h, x)


class ExpertBank(Module):
    def __init__(self, rng: np.random.Generator, num_experts: int, d: int, inner: int, sublayers: int = 2):
        if num_experts < 1:
            raise ContractError("need at least one expert")
        self.experts = [Expert(rng, d, inner, sublayers) for _ in range(num_experts)]

    def __len__(self) -> int:
        return len(self.experts)

    def __getitem__(self, i: int) -> Expert:
        return self.experts[i]


class ExpertCentroids(Module):
    def __init__(self, rng: np.random.Generator, num_experts: int, d: int):
        self.E = Parameter(normal_init(rng, (num_experts, d)))

    @property
    def num_experts(self) -> int:
        return self.E.shape[0]


def _centroid_tensor(E) -> Tensor:
    return E.E if isinstance(E, ExpertCentroids) else E


def assignment_scores(h: Tensor, E) -> Tensor:
    """Affinity ``s[t, i] = <E_i, h_t>`` for every token and expert."""
    E = _centroid_tensor(E)
    if h.ndim != 2 or E.ndim != 2 or h.shape[1] != E.shape[1]:
        raise DimensionError(f"assignment_scores: hidden {h.shape} vs centroids {E.shape}")
    return T.matmul(h, T.transpose(E, (1, 0)))


def greedy_assign(scores) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest expert index. Not differentiable."""
    s = scores.values if isinstance(scores, Tensor) else np.asarray(scores)
    if s.ndim != 2 or s.shape[1] < 1:
        raise ContractError(f"greedy_assign needs a (T, N) score matrix with N >= 1, got {s.shape}")
    return np.argmax(s, axis=1).astype(np.int64)


def sigmoid_decision(scores: Tensor, assignment, source: str) -> RoutingDecision:
    """Decision whose gate is ``sigmoid(s[t, a_t])``."""
    gate = T.sigmoid(T.pick(scores, assignment))
    return RoutingDecision(scores, assignment, gate, source)


def greedy_route(scores: Tensor) -> RoutingDecision:
    return sigmoid_decision(scores, greedy_assign(scores), "stage1-greedy")


def expert_outputs(h: Tensor, assignment: np.ndarray, experts: ExpertBank) -> Tensor:
    """``FFN_{a_t}(h_t)`` for every token; each expert only sees its own tokens."""
    n = len(experts)
    a = np.asarray(assignment, dtype=np.int64)
    if a.shape != (h.shape[0],):
        raise DimensionError(f"{a.shape[0]} assignments for {h.shape[0]} tokens")
    if a.size and (a.min() < 0 or a.max() >= n):
        raise IndexError(f"expert index out of range for {n} experts")
    parts, index_sets = [], []
    for i in range(n):
        idx = np.flatnonzero(a == i)
        if idx.size == 0:
            continue
        parts.append(experts[i](T.take_rows(h, idx)))
        index_sets.append(idx)
    return T.scatter_rows(parts, index_sets, h.shape[0])


def moe_forward(h: Tensor, decision: RoutingDecision, experts: ExpertBank) -> Tensor:
    """``gate_t * FFN_{a_t}(h_t) + h_t``; the gate carries gradient back to the scores."""
    delta = expert_outputs(h, decision.assignment, experts)
    return T.add(h, T.mul_rows(delta, decision.gate))


def load_coefficients(assignment, num_experts: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-expert ``(|A_i| - n_mean) / n_mean`` and the raw loads."""
    if num_experts < 1:
        raise ContractError("balance loss needs at least one expert")
    a = np.asarray(assignment, dtype=np.int64)
    loads = np.bincount(a, minlength=num_experts).astype(np.float64)
    mean = a.shape[0] / num_experts
    if mean <= 0:
        raise ContractError("balance loss needs at least one token")
    return (loads - mean) / mean, loads


def balance_loss(decision: RoutingDecision, alpha: float, num_experts: int | None = None) -> Tensor:
    """``alpha * sum_i coef_i * sum_{t in A_i} gate_t``.

    The load coefficients are constants; gradient reaches the scores only through
    the gate values of the tokens each expert actually received.
    """
    if decision.source == "distilled-frozen":
        raise ContractError("balance loss applies only to trainable routers")
    if num_experts is None:
        if decision.scores is None:
            raise ContractError("num_experts is required when the decision carries no scores")
        num_experts = decision.scores.shape[1]
    coef, _ = load_coefficients(decision.assignment, num_experts)
    weights = alpha * coef[decision.assignment]
    return T.weighted_sum(decision.gate, weights, op="balance_loss")


def balance_stats(assignment, num_experts: int) -> BalanceStats:
    a = np.asarray(assignment, dtype=np.int64)
    loads = np.bincount(a, minlength=num_experts)
    mean = a.shape[0] / num_experts if num_experts else 0.0
    ratio = float(loads.max() / mean) if mean > 0 else 0.0
    return BalanceStats(loads=loads, mean_load=mean, max_mean_ratio=ratio)


def stage1_loss(task: Tensor, bal: Tensor, dis: Tensor) -> Tensor:
    """Task, balance and distillation losses summed without extra weights."""
    return T.sum_scalars(task, bal, dis, op="stage1_loss")


def stage2_forward(
    h: Tensor,
    frozen: "DistilledRouter",
    E,
    experts: ExpertBank,
    tokens,
    score_input: Tensor | None = None,
) -> tuple[Tensor, RoutingDecision]:
    """MoE output with the expert chosen by the frozen router from token ids alone.

    The gate still uses the backbone's own affinity ``s[t, a_t]`` so the
    centroids keep learning. ``score_input`` overrides the representation the
    scores are computed from (defaults to ``h``).
    """
    if not frozen.is_frozen:
        raise ContractError("stage-2 routing requires a frozen distilled router")
    assignment = frozen.route(tokens)
    scores = assignment_scores(h if score_input is None else score_input, E)
    decision = sigmoid_decision(scores, assignment, "distilled-frozen")
    return moe_forward(h, decision, experts), decision


def stage2_loss(task: Tensor) -> Tensor:
    """Stage 2 trains on the task loss alone."""
    return T.identity(task, op="stage2_loss")
