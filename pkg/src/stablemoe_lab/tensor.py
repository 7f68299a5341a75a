"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation is a pure numpy kernel returning ``(output, vjp)``
where ``vjp`` maps the output cotangent to one cotangent per input (``None`` for
inputs that need no gradient). Calling an operation records a :class:`Node` on
the output tensor; :meth:`Tensor.backward` walks those nodes in reverse
topological order.

Broadcasting is deliberately limited to row-wise bias addition. Any other
shape mismatch raises :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Parameter",
    "Node",
    "ComputationRecord",
    "record",
    "no_grad",
    "set_deterministic",
    "is_deterministic",
    "grad_check",
    "add",
    "sub",
    "mul",
    "scale",
    "mul_rows",
    "matmul",
    "transpose",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "sigmoid",
    "gelu",
    "relu",
    "exp",
    "log",
    "softmax",
    "causal_softmax",
    "softmax_cross_entropy",
    "layer_norm",
    "take_rows",
    "pick",
    "scatter_rows",
    "weighted_sum",
    "sum_scalars",
    "identity",
]

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True
_ACTIVE_RECORDS: list["ComputationRecord"] = []
_DETERMINISTIC = {"on": False, "limiter": None}


class Tensor:
    """A dense array plus an optional gradient accumulator."""

    __slots__ = ("values", "grad", "requires_grad", "node", "name")

    def __init__(self, values, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(values, Tensor):
            values = values.values
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.values: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, values, requires_grad: bool = True, dtype=None, name: str | None = None):
        super().__init__(np.array(values, copy=True), requires_grad=requires_grad, dtype=dtype, name=name)


@dataclass(eq=False)
class Node:
    """One recorded operation: inputs, output and the local gradient rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    kernel: Callable[..., tuple[np.ndarray, Callable]]


@dataclass
class ComputationRecord:
    """Operation trace of one forward pass, in execution (hence topological) order."""

    nodes: list[Node] = field(default_factory=list)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def count(self, op: str) -> int:
        return sum(1 for n in self.nodes if n.op == op)

    def find(self, op: str) -> list[Node]:
        return [n for n in self.nodes if n.op == op]

    def replay(self) -> list[np.ndarray]:
        """Re-run every kernel on its recorded inputs and return the fresh outputs.

        Inputs produced inside the trace are fed from the replayed values, so a
        bit-exact match with the recorded outputs shows the forward pass is
        reproducible.
        """
        fresh: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            args = [fresh.get(id(t), t.values) for t in node.inputs]
            out, _ = node.kernel(*args)
            fresh[id(node.output)] = out
            outs.append(out)
        return outs


@contextlib.contextmanager
def record() -> Iterator[ComputationRecord]:
    """Collect every operation executed inside the block."""
    rec = ComputationRecord()
    _ACTIVE_RECORDS.append(rec)
    try:
        yield rec
    finally:
        _ACTIVE_RECORDS.remove(rec)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_deterministic(flag: bool) -> None:
    """Pin BLAS to a single thread so kernels are value-deterministic."""
    if flag and not _DETERMINISTIC["on"]:
        from threadpoolctl import threadpool_limits

        _DETERMINISTIC["limiter"] = threadpool_limits(limits=1)
    elif not flag and _DETERMINISTIC["on"]:
        limiter = _DETERMINISTIC["limiter"]
        if limiter is not None:
            limiter.restore_original_limits()
        _DETERMINISTIC["limiter"] = None
    _DETERMINISTIC["on"] = bool(flag)


def is_deterministic() -> bool:
    return _DETERMINISTIC["on"]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op: str, kernel: Callable, *inputs: Tensor) -> Tensor:
    out_val, vjp = kernel(*[t.values for t in inputs])
    needs_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(out_val, requires_grad=needs_grad, dtype=out_val.dtype)
    if needs_grad or _ACTIVE_RECORDS:
        node = Node(op, tuple(inputs), out, vjp, kernel)
        if needs_grad:
            out.node = node
        for rec in _ACTIVE_RECORDS:
            rec.nodes.append(node)
    return out


def _topo_order(root: Tensor) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root.node, False)] if root.node is not None else []
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append((t.node, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
    if root.values.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    if root.node is None:
        root.grad = np.ones_like(root.values) if root.grad is None else root.grad + 1.0
        return
    cotangents: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
    for node in reversed(_topo_order(root)):
        g = cotangents.pop(id(node.output), None)
        if g is None:
            continue
        grads = node.vjp(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.values.dtype).reshape(t.shape)
            if t.node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                cotangents[key] = gi if key not in cotangents else cotangents[key] + gi
    # intermediates with requires_grad keep no grad; only leaves accumulate


def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-D bias added to every row of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.shape == bv.shape:
        def kernel(x, y):
            return x + y, lambda g: (g, g)
    elif bv.ndim == 1 and av.ndim >= 1 and av.shape[-1] == bv.shape[0]:
        def kernel(x, y):
            return x + y, lambda g: (g, g.reshape(-1, y.shape[0]).sum(axis=0))
    else:
        raise DimensionError(f"add: shapes {av.shape} and {bv.shape} do not match")
    return _apply("add", kernel, a, b)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a.values, b.values, "sub")
    return _apply("sub", lambda x, y: (x - y, lambda g: (g, -g)), a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a.values, b.values, "mul")
    return _apply("mul", lambda x, y: (x * y, lambda g: (g * y, g * x)), a, b)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def kernel(x):
        return (x * c).astype(x.dtype, copy=False), lambda g: (g * c,)

    return _apply("scale", kernel, a)


def mul_rows(x: Tensor, g: Tensor) -> Tensor:
    """Scale row ``t`` of ``x`` (shape T x d) by ``g[t]``."""
    if x.ndim != 2 or g.shape != (x.shape[0],):
        raise DimensionError(f"mul_rows: shapes {x.shape} and {g.shape} do not match")

    def kernel(xv, gv):
        def vjp(go):
            return go * gv[:, None], (go * xv).sum(axis=1)

        return xv * gv[:, None], vjp

    return _apply("mul_rows", kernel, x, g)


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or a.ndim != b.ndim or sa[:-2] != sb[:-2] or sa[-1] != sb[-2]:
        raise DimensionError(f"matmul: shapes {sa} and {sb} are not compatible")

    def kernel(x, y):
        return x @ y, lambda g: (g @ _swap_last(y), _swap_last(x) @ g)

    return _apply("matmul", kernel, a, b)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def kernel(v):
        return np.ascontiguousarray(v.transpose(axes)), lambda g: (g.transpose(inv),)

    return _apply("transpose", kernel, x)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape

    def kernel(v):
        return v.reshape(shape), lambda g: (g.reshape(old),)

    return _apply("reshape", kernel, x)


def tensor_sum(x: Tensor) -> Tensor:
    def kernel(v):
        return np.asarray(v.sum(dtype=np.float64)), lambda g: (np.full(v.shape, g, dtype=v.dtype),)

    return _apply("sum", kernel, x)


def tensor_mean(x: Tensor) -> Tensor:
    n = x.values.size

    def kernel(v):
        return np.asarray(v.mean(dtype=np.float64)), lambda g: (np.full(v.shape, g / n, dtype=v.dtype),)

    return _apply("mean", kernel, x)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    def kernel(v):
        y = _sigmoid_np(v)
        return y, lambda g: (g * y * (1.0 - y),)

    return _apply("sigmoid", kernel, x)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth, so finite differences stay meaningful)."""

    def kernel(v):
        v2 = v * v
        th = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
        y = 0.5 * v * (1.0 + th)

        def vjp(g):
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
            return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner),)

        return y.astype(v.dtype, copy=False), vjp

    return _apply("gelu", kernel, x)


def relu(x: Tensor) -> Tensor:
    def kernel(v):
        mask = v > 0
        return v * mask, lambda g: (g * mask,)

    return _apply("relu", kernel, x)


def exp(x: Tensor) -> Tensor:
    def kernel(v):
        y = np.exp(v)
        return y, lambda g: (g * y,)

    return _apply("exp", kernel, x)


def log(x: Tensor) -> Tensor:
    return _apply("log", lambda v: (np.log(v), lambda g: (g / v,)), x)


def _softmax_np(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_vjp(y: np.ndarray):
    return lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""

    def kernel(v):
        y = _softmax_np(v)
        return y, _softmax_vjp(y)

    return _apply("softmax", kernel, x)


def causal_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with key positions after the query masked out."""
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise DimensionError(f"causal_softmax: needs square trailing axes, got {x.shape}")
    n = x.shape[-1]
    future = np.triu(np.ones((n, n), dtype=bool), k=1)

    def kernel(v):
        masked = np.where(future, -np.inf, v)
        y = _softmax_np(masked).astype(v.dtype, copy=False)
        return y, _softmax_vjp(y)

    return _apply("causal_softmax", kernel, x)


def softmax_cross_entropy(logits: Tensor, target, reduction: str = "mean", op: str = "softmax_cross_entropy") -> Tensor:
    """Cross-entropy of softmax(logits) against integer targets.

    ``logits`` is a single row (N,) with a scalar target, or a (T, N) matrix with
    T targets. The reduction over rows is ``"sum"`` or ``"mean"``; the result is a
    double-precision scalar.
    """
    if reduction not in ("sum", "mean"):
        raise ContractError(f"unknown reduction {reduction!r}")
    single = logits.ndim == 1
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    rows = 1 if single else logits.shape[0]
    n = logits.shape[-1]
    if logits.ndim not in (1, 2) or tgt.shape != (rows,):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs targets {tgt.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= n):
        raise IndexError(f"target index out of range for {n} classes")
    denom = rows if reduction == "mean" else 1

    def kernel(v):
        v2 = v.reshape(rows, n).astype(np.float64)
        shifted = v2 - v2.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        picked = shifted[np.arange(rows), tgt]
        loss = np.asarray((lse - picked).sum() / denom)

        def vjp(g):
            p = np.exp(shifted - lse[:, None])
            p[np.arange(rows), tgt] -= 1.0
            return ((g / denom) * p).reshape(v.shape).astype(v.dtype),

        return loss, vjp

    return _apply(op, kernel, logits)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the learned affine map."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")

    def kernel(v, gm, bt):
        mu = v.mean(axis=-1, keepdims=True)
        xc = v - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        y = xhat * gm + bt

        def vjp(g):
            flat_g = g.reshape(-1, d)
            flat_xhat = xhat.reshape(-1, d)
            dgamma = (flat_g * flat_xhat).sum(axis=0)
            dbeta = flat_g.sum(axis=0)
            gx = g * gm
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            return dx, dgamma, dbeta

        return y.astype(v.dtype, copy=False), vjp

    return _apply("layer_norm", kernel, x, gamma, beta)


def take_rows(table: Tensor, ids, op: str = "take_rows") -> Tensor:
    """Rows ``table[ids]``; the gradient scatters back into the selected rows only."""
    idx = np.asarray(ids, dtype=np.int64)
    nrows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= nrows):
        raise IndexError(f"row index out of range for table with {nrows} rows")

    def kernel(v):
        def vjp(g):
            out = np.zeros_like(v)
            np.add.at(out, idx, g)
            return (out,)

        return v[idx], vjp

    return _apply(op, kernel, table)


def pick(x: Tensor, cols) -> Tensor:
    """``x[t, cols[t]]`` for every row ``t`` of a 2-D tensor."""
    idx = np.asarray(cols, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError(f"pick: tensor {x.shape} vs indices {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError(f"column index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])

    def kernel(v):
        def vjp(g):
            out = np.zeros_like(v)
            out[rows, idx] = g
            return (out,)

        return v[rows, idx], vjp

    return _apply("pick", kernel, x)


def scatter_rows(parts: Sequence[Tensor], index_sets: Sequence[np.ndarray], n_rows: int) -> Tensor:
    """Assemble an (n_rows, d) tensor with ``out[index_sets[j]] = parts[j]``; uncovered rows are zero."""
    if len(parts) != len(index_sets) or not parts:
        raise ContractError("scatter_rows needs one index set per part and at least one part")
    idx = [np.asarray(i, dtype=np.int64) for i in index_sets]
    d = parts[0].shape[1]
    for p, i in zip(parts, idx):
        if p.ndim != 2 or p.shape != (i.shape[0], d):
            raise DimensionError(f"scatter_rows: part {p.shape} vs {i.shape[0]} indices")

    def kernel(*vals):
        out = np.zeros((n_rows, d), dtype=vals[0].dtype)
        for v, i in zip(vals, idx):
            out[i] = v
        return out, lambda g: tuple(g[i] for i in idx)

    return _apply("scatter_rows", kernel, *parts)


def weighted_sum(x: Tensor, weights, op: str = "weighted_sum") -> Tensor:
    """Scalar ``sum(weights * x)`` with ``weights`` held constant (double precision)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise DimensionError(f"{op}: values {x.shape} vs weights {w.shape}")

    def kernel(v):
        return np.asarray((w * v).sum()), lambda g: ((g * w).astype(v.dtype),)

    return _apply(op, kernel, x)


def sum_scalars(*terms: Tensor, op: str = "sum_scalars") -> Tensor:
    for t in terms:
        if t.values.size != 1:
            raise ContractError(f"{op}: expected scalar terms, got shape {t.shape}")

    def kernel(*vals):
        total = np.asarray(sum(np.asarray(v, dtype=np.float64).reshape(()) for v in vals))
        return total, lambda g: tuple(np.full(v.shape, g, dtype=v.dtype) for v in vals)

    return _apply(op, kernel, *terms)


def identity(x: Tensor, op: str = "identity") -> Tensor:
    return _apply(op, lambda v: (v.copy(), lambda g: (g,)), x)


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-3, floor: float = 1e-2) -> float:
    """Max relative error between analytic gradients and central differences.

    Everything runs in double precision. The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps coordinates whose true
    gradient is ~0 from dividing by round-off.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    base = np.array(point.values if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    out = f(x)
    out.backward()
    analytic = np.zeros_like(base) if x.grad is None else x.grad.astype(np.float64)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for k in range(base.size):
            plus = base.copy().reshape(-1)
            minus = base.copy().reshape(-1)
            plus[k] += h
            minus[k] -= h
            fp = f(Tensor(plus.reshape(base.shape), dtype=np.float64)).item()
            fm = f(Tensor(minus.reshape(base.shape), dtype=np.float64)).item()
            flat[k] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0


def grad_check_parameter(
    loss: Callable[[], Tensor], param: Tensor, h: float = 1e-3, floor: float = 1e-2, coords=None
) -> float:
    """``grad_check`` for a tensor that lives inside a larger graph.

    ``loss`` rebuilds the objective from scratch on each call and must read
    ``param`` by reference. The caller is responsible for double precision.
    ``coords`` restricts the finite differences to some flat indices.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    saved, saved_grad = param.values, param.grad
    base = np.array(saved, dtype=np.float64)
    idx = np.arange(base.size) if coords is None else np.asarray(coords, dtype=np.int64)
    try:
        param.values = base.copy()
        param.grad = None
        loss().backward()
        analytic = np.zeros(base.size) if param.grad is None else param.grad.astype(np.float64).reshape(-1)
        numeric = np.zeros(idx.size)
        with no_grad():
            for j, k in enumerate(idx):
                for sign in (1.0, -1.0):
                    v = base.copy().reshape(-1)
                    v[k] += sign * h
                    param.values = v.reshape(base.shape)
                    numeric[j] += sign * loss().item()
                numeric[j] /= 2 * h
        a = analytic[idx]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        return float(np.max(np.abs(a - numeric) / denom)) if idx.size else 0.0
    finally:
        param.values, param.grad = saved, saved_grad
