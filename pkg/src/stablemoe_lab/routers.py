"""Routing strategies: distilled (StableMoE), Switch-style softmax, auction (BASE-style) and fixed hashing."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from . import tensor as T
from .exceptions import ContractError, DimensionError, IntegrityError
from .moe import RoutingDecision, assignment_scores, greedy_assign
from .nn import Module, checksum, normal_init
from .tensor import Parameter, Tensor

ROUTER_EXPORT_VERSION = 1


class DistilledRouter(Module):
    """Context-free router: a word-embedding table ``D`` plus its own centroids ``E_hat``."""

    def __init__(self, rng: np.random.Generator, vocab_size: int, num_experts: int, feature_dim: int = 50, seed: int = 0):
        self.D = Parameter(normal_init(rng, (vocab_size, feature_dim)))
        self.E_hat = Parameter(normal_init(rng, (num_experts, feature_dim)))
        self.is_frozen = False
        self.frozen_checksum: str | None = None
        self.seed = seed

    @property
    def vocab_size(self) -> int:
        return self.D.shape[0]

    @property
    def num_experts(self) -> int:
        return self.E_hat.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.D.shape[1]

    def features(self, tokens) -> Tensor:
        return distilled_features(tokens, self)

    def scores(self, tokens) -> Tensor:
        return distilled_scores(self.features(tokens), self.E_hat)

    def route(self, tokens) -> np.ndarray:
        """Expert index per token id; a pure function of the id."""
        with T.no_grad():
            return greedy_assign(self.scores(np.asarray(tokens).reshape(-1)))

    def checksum(self) -> str:
        return checksum([self.D, self.E_hat])

    def verify(self) -> None:
        """Raise if a frozen router's parameters changed since freezing."""
        if self.is_frozen and self.checksum() != self.frozen_checksum:
            raise IntegrityError("frozen router parameters changed after freezing")


def distilled_features(tokens, router: DistilledRouter) -> Tensor:
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    return T.take_rows(router.D, ids, op="router_features")


def distilled_scores(features: Tensor, E_hat: Tensor) -> Tensor:
    if features.ndim != 2 or E_hat.ndim != 2 or features.shape[1] != E_hat.shape[1]:
        raise DimensionError(f"distilled_scores: features {features.shape} vs centroids {E_hat.shape}")
    return T.matmul(features, T.transpose(E_hat, (1, 0)))


def distillation_loss(distilled: Tensor, teacher_assignment, reduction: str = "sum") -> Tensor:
    """Cross-entropy of the distilled scores against the experts tokens were actually sent to."""
    teacher = np.asarray(teacher_assignment, dtype=np.int64)
    return T.softmax_cross_entropy(distilled, teacher, reduction=reduction, op="distillation_loss")


def freeze_router(router: DistilledRouter) -> DistilledRouter:
    """Stop training the router and remember a checksum of its parameters. Idempotent."""
    if router.is_frozen:
        return router
    for p in (router.D, router.E_hat):
        p.requires_grad = False
        p.grad = None
    router.is_frozen = True
    router.frozen_checksum = router.checksum()
    return router


def routing_agreement(frozen: DistilledRouter, E, h: Tensor, tokens) -> float:
    """Fraction of tokens where the distilled router picks the teacher's greedy expert."""
    with T.no_grad():
        teacher = greedy_assign(assignment_scores(h, E))
    student = frozen.route(tokens)
    if teacher.shape != student.shape:
        raise DimensionError(f"{student.shape[0]} tokens vs {teacher.shape[0]} hidden rows")
    return float(np.mean(teacher == student)) if teacher.size else 0.0


def switch_route(scores: Tensor) -> RoutingDecision:
    """Greedy top-1 with the softmax probability of the chosen expert as gate."""
    a = greedy_assign(scores)
    gate = T.pick(T.softmax(scores), a)
    return RoutingDecision(scores, a, gate, "switch")


# auction -------------------------------------------------------------------


@numba.njit(cache=True)
def _auction_kernel(S, capacity, eps):
    n_tok, n_exp = S.shape
    prices = np.zeros((n_exp, capacity))
    holder = -np.ones((n_exp, capacity), dtype=np.int64)
    assigned = -np.ones(n_tok, dtype=np.int64)
    queue = np.arange(n_tok - 1, -1, -1).astype(np.int64)
    top = n_tok
    min_price = np.zeros(n_exp)
    min_slot = np.zeros(n_exp, dtype=np.int64)
    n_bids = 0
    while top > 0:
        top -= 1
        t = queue[top]
        best_j = -1
        v1 = -np.inf
        v2 = -np.inf
        for j in range(n_exp):
            v = S[t, j] - min_price[j]
            if v > v1:
                v2 = v1
                v1 = v
                best_j = j
            elif v > v2:
                v2 = v
        # the second-cheapest slot of the winning expert is also an alternative
        if capacity > 1:
            k1 = min_slot[best_j]
            second = np.inf
            for k in range(capacity):
                if k != k1 and prices[best_j, k] < second:
                    second = prices[best_j, k]
            alt = S[t, best_j] - second
            if alt > v2:
                v2 = alt
        if v2 == -np.inf:
            v2 = v1
        k = min_slot[best_j]
        prices[best_j, k] += v1 - v2 + eps
        prev = holder[best_j, k]
        holder[best_j, k] = t
        assigned[t] = best_j
        if prev >= 0:
            assigned[prev] = -1
            queue[top] = prev
            top += 1
        lo = 0
        for kk in range(1, capacity):
            if prices[best_j, kk] < prices[best_j, lo]:
                lo = kk
        min_slot[best_j] = lo
        min_price[best_j] = prices[best_j, lo]
        n_bids += 1
    return assigned, prices, n_bids


@dataclass
class AuctionState:
    """Final prices and bookkeeping of one auction run."""

    prices: np.ndarray
    capacity: int
    epsilon: float
    n_bids: int

    @property
    def loads(self) -> np.ndarray:
        return self.prices.shape[1] - np.sum(self.prices == 0.0, axis=1)


def default_auction_epsilon(scores: np.ndarray, ratio: float = 1e-3) -> float:
    spread = float(np.max(scores) - np.min(scores)) if scores.size else 0.0
    return ratio * spread if spread > 0 else ratio


def auction_assign(scores, capacity: int | None = None, epsilon: float | None = None, return_state: bool = False):
    """Capacity-constrained forward auction (Gauss-Seidel bidding, fixed increment).

    Each expert offers ``capacity`` identical slots; tokens bid for the cheapest
    slot of their best expert and raise its price by the value gap to their
    next-best option plus ``epsilon``. The result assigns every token, respects
    capacities and its total affinity is within ``T * epsilon`` of the optimum.
    """
    S = np.asarray(scores.values if isinstance(scores, Tensor) else scores, dtype=np.float64)
    if S.ndim != 2:
        raise DimensionError(f"auction_assign needs a (T, N) score matrix, got {S.shape}")
    n_tok, n_exp = S.shape
    if capacity is None:
        capacity = -(-n_tok // n_exp)
    if epsilon is None:
        epsilon = default_auction_epsilon(S)
    if epsilon <= 0:
        raise ContractError("auction epsilon must be positive")
    if capacity * n_exp < n_tok:
        raise ContractError(f"infeasible capacity: {n_exp} experts x {capacity} slots < {n_tok} tokens")
    if n_tok == 0:
        a = np.zeros(0, dtype=np.int64)
        state = AuctionState(np.zeros((n_exp, capacity)), capacity, epsilon, 0)
    else:
        a, prices, n_bids = _auction_kernel(np.ascontiguousarray(S), int(capacity), float(epsilon))
        state = AuctionState(prices, capacity, epsilon, int(n_bids))
    return (a, state) if return_state else a


def auction_route(scores: Tensor, capacity: int | None = None, epsilon_ratio: float = 1e-3) -> RoutingDecision:
    """BASE-style decision: balanced auction assignment, sigmoid gate on the assigned score."""
    eps = default_auction_epsilon(scores.values, epsilon_ratio)
    a = auction_assign(scores, capacity=capacity, epsilon=eps)
    gate = T.sigmoid(T.pick(scores, a))
    return RoutingDecision(scores, a, gate, "auction")


# hashing -------------------------------------------------------------------


@dataclass(frozen=True)
class HashTable:
    table: np.ndarray
    num_experts: int
    seed: int | None

    @property
    def vocab_size(self) -> int:
        return int(self.table.shape[0])


def build_hash_table(vocab_size: int, num_experts: int, seed: int) -> HashTable:
    """Deal a seeded permutation of token ids round-robin to the experts."""
    if num_experts < 1:
        raise ContractError("need at least one expert")
    perm = np.random.default_rng(seed).permutation(vocab_size)
    table = np.empty(vocab_size, dtype=np.int64)
    table[perm] = np.arange(vocab_size) % num_experts
    table.setflags(write=False)
    return HashTable(table, num_experts, seed)


def modulo_hash_table(vocab_size: int, num_experts: int) -> HashTable:
    table = np.arange(vocab_size, dtype=np.int64) % num_experts
    table.setflags(write=False)
    return HashTable(table, num_experts, None)


def hash_assign(tokens, table: HashTable) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise IndexError(f"token id out of range for hash table of {table.vocab_size} ids")
    return table.table[ids]


def hash_route(tokens, table: HashTable, scores: Tensor | None = None) -> RoutingDecision:
    """Hard gating: the chosen expert is used with weight exactly 1."""
    a = hash_assign(tokens, table)
    gate = Tensor(np.ones(a.shape[0], dtype=T.DEFAULT_DTYPE))
    return RoutingDecision(scores, a, gate, "hash")


# export --------------------------------------------------------------------


def _blob_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(arr.tobytes()).hexdigest()


def export_router(router: DistilledRouter, directory) -> Path:
    """Write ``manifest.json`` plus little-endian float32 blobs for ``D`` and ``E_hat``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    blobs = {}
    for name, p in (("D", router.D), ("E_hat", router.E_hat)):
        arr = np.ascontiguousarray(p.values, dtype="<f4")
        fname = f"{name}.f32"
        (out / fname).write_bytes(arr.tobytes())
        blobs[name] = {"file": fname, "shape": list(arr.shape), "sha256": _blob_digest(arr)}
    manifest = {
        "version": ROUTER_EXPORT_VERSION,
        "vocab_size": router.vocab_size,
        "num_experts": router.num_experts,
        "feature_dim": router.feature_dim,
        "seed": router.seed,
        "frozen": router.is_frozen,
        "blobs": blobs,
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, out / "manifest.json")
    return out / "manifest.json"


def import_router(directory) -> DistilledRouter:
    """Load an exported router, verifying version and blob checksums; the result is frozen."""
    src = Path(directory)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest.get("version") != ROUTER_EXPORT_VERSION:
        raise IntegrityError(f"unsupported router export version {manifest.get('version')!r}")
    arrays = {}
    for name in ("D", "E_hat"):
        meta = manifest["blobs"][name]
        raw = (src / meta["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype="<f4")
        if _blob_digest(arr) != meta["sha256"]:
            raise IntegrityError(f"checksum mismatch for router blob {name}")
        arrays[name] = arr.reshape(meta["shape"]).astype(np.float32)
    router = DistilledRouter(
        np.random.default_rng(0), manifest["vocab_size"], manifest["num_experts"], manifest["feature_dim"], manifest["seed"]
    )
    router.D.values = arrays["D"]
    router.E_hat.values = arrays["E_hat"]
    return freeze_router(router)
