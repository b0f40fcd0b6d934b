"""Dense tensors with reverse-mode automatic differentiation.

Every primitive returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``backward`` builds a
:class:`GradTape` (a topological ordering of the graph) and replays it in
reverse.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes, python scalars, or an operand whose shape is a suffix of the other's
(broadcast over leading batch dimensions).  Per-row scaling has its own
primitive, :func:`scale_rows`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError

_PRECISIONS = {"single": np.float32, "double": np.float64}
_state = {"dtype": np.float32, "grad": True}


def get_dtype():
    return _state["dtype"]


def set_precision(name: str) -> None:
    """Select the run-level scalar type: ``"single"`` or ``"double"``."""
    try:
        _state["dtype"] = _PRECISIONS[name]
    except KeyError:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}") from None


def precision_name(dtype=None) -> str:
    dtype = np.dtype(get_dtype() if dtype is None else dtype)
    for name, dt in _PRECISIONS.items():
        if np.dtype(dt) == dtype:
            return name
    raise ConfigError(f"unsupported scalar type {dtype}")


@contextlib.contextmanager
def precision(name: str):
    previous = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = previous


def grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def no_grad():
    previous = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else get_dtype()
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def clone(self) -> "Tensor":
        """Deep copy of the data, keeping the ``requires_grad`` flag."""
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        GradTape(self).backward(grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class GradTape:
    """Topologically ordered record of the graph that produced ``root``.

    ``nodes`` lists every tensor reachable from the root (parents before
    children); ``backward`` walks it in reverse, visiting each node once.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self):
        return len(self.nodes)

    def backward(self, grad=None) -> None:
        root = self.root
        if not root.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if root.data.size != 1:
                raise DimensionError("implicit gradient only defined for scalar outputs")
            seed = np.ones_like(root.data)
        else:
            seed = np.asarray(grad, dtype=root.dtype).reshape(root.shape)
        pending: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _dtype_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.dtype
    return get_dtype()


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise DimensionError(f"{op}: shapes {sa} and {sb} are not leading-dimension broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


def add(a, b) -> Tensor:
    dtype = _dtype_of(a, b)
    a, b = _lift(a, dtype), _lift(b, dtype)
    _check_broadcast(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    dtype = _dtype_of(a, b)
    a, b = _lift(a, dtype), _lift(b, dtype)
    _check_broadcast(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    dtype = _dtype_of(a, b)
    a, b = _lift(a, dtype), _lift(b, dtype)
    _check_broadcast(a, b, "mul")

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result((a.data * b.data).astype(a.dtype, copy=False), (a, b), back, "mul")


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every trailing-axis row of ``x`` by the matching entry of ``s``.

    ``s.shape`` must equal ``x.shape[:-1]``.
    """
    s = _lift(s, x.dtype)
    if s.shape != x.shape[:-1]:
        raise DimensionError(f"scale_rows: scale shape {s.shape} does not match rows of {x.shape}")
    factor = s.data[..., None]

    def back(g):
        gx = g * factor if x.requires_grad else None
        gs = (g * x.data).sum(axis=-1) if s.requires_grad else None
        return gx, gs

    return _result(x.data * factor, (x, s), back, "scale_rows")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``b`` is either a 2-D weight ``(k, n)`` applied to every leading index of
    ``a`` (shape ``(..., m, k)`` or ``(..., k)``), or has the same leading
    dimensions as ``a`` (batched product).
    """
    if a.ndim < 1 or b.ndim < 2:
        raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    if b.ndim == 2:
        k, n = b.shape

        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, k)

        def back(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result((a2 @ b.data).reshape(lead + (n,)), (a, b), back, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions disagree, {a.shape} @ {b.shape}")

    def back_batched(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), back_batched, "matmul")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)

    def back(g):
        return (g * y * (1.0 - y),)

    return _result(y, (x,), back, "sigmoid")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero outside the interval."""
    inside = (x.data >= lo) & (x.data <= hi)

    def back(g):
        return (g * inside,)

    return _result(np.clip(x.data, lo, hi), (x,), back, "clip")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)

    def back(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return _result(x.data * s, (x,), back, "silu")


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalisation over the last axis, then an elementwise gain."""
    if weight.shape != x.shape[-1:]:
        raise DimensionError(f"rms_norm: weight {weight.shape} does not match width of {x.shape}")
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    normed = x.data * inv

    def back(g):
        gw = _unbroadcast(g * normed, weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gn = g * weight.data
            gx = inv * (gn - normed * np.mean(gn * normed, axis=-1, keepdims=True))
        return gx, gw

    return _result((normed * weight.data).astype(x.dtype, copy=False), (x, weight), back, "rms_norm")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("embedding: table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding: ids out of range for table of {table.shape[0]} rows")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), back, "embedding")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def back(g):
        return (g.reshape(x.shape),)

    return _result(data, (x,), back, "reshape")


def sum_all(x: Tensor) -> Tensor:
    def back(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), back, "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def back(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), back, "mean")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mismatched shapes {sorted(shapes)}")

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, back, "stack")


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, s, d = x.shape
    return x.reshape(b, s, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _attention_probs(q: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    s = q.shape[-2]
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    future = np.triu(np.ones((s, s), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    return w / w.sum(axis=-1, keepdims=True)


def _attention_inputs(q: Tensor, k: Tensor, v: Tensor, n_heads: int):
    if not (q.shape == k.shape == v.shape) or q.ndim < 2:
        raise DimensionError(f"attention: q, k, v shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    d = q.shape[-1]
    if n_heads < 1 or d % n_heads:
        raise ConfigError(f"attention: {n_heads} heads do not divide model width {d}")
    lead = q.shape[:-2]
    s = q.shape[-2]
    flat = lambda t: t.data.reshape(-1, s, d)  # noqa: E731
    return lead, s, d, flat(q), flat(k), flat(v)


def causal_attention_weights(q: Tensor, k: Tensor, n_heads: int) -> np.ndarray:
    """Softmax attention weights, shape ``(..., heads, S, S)``, rows sum to 1."""
    lead, s, d, qf, kf, _ = _attention_inputs(q, k, k, n_heads)
    scale = 1.0 / math.sqrt(d // n_heads)
    p = _attention_probs(_split_heads(qf, n_heads), _split_heads(kf, n_heads), scale)
    return p.reshape(lead + (n_heads, s, s))


def causal_softmax_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention under a strict causal mask.

    Inputs are ``(..., S, d)``; heads are contiguous slices of the width.
    """
    lead, s, d, qf, kf, vf = _attention_inputs(q, k, v, n_heads)
    scale = 1.0 / math.sqrt(d // n_heads)
    qh, kh, vh = (_split_heads(t, n_heads) for t in (qf, kf, vf))
    p = _attention_probs(qh, kh, scale)
    out = _merge_heads(p @ vh).reshape(q.shape)

    def back(g):
        gh = _split_heads(g.reshape(-1, s, d), n_heads)
        gv = np.swapaxes(p, -1, -2) @ gh
        gp = gh @ np.swapaxes(vh, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = np.swapaxes(gs, -1, -2) @ qh
        return tuple(_merge_heads(t).reshape(q.shape) for t in (gq, gk, gv))

    return _result(out.astype(q.dtype, copy=False), (q, k, v), back, "attention")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean next-token cross-entropy over positions where ``mask`` is true.

    ``logits`` is ``(..., V)``; ``targets`` and ``mask`` have the leading shape.
    An all-false mask yields a constant zero.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    z = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    flat_t = targets.reshape(-1)
    flat_m = mask.reshape(-1)
    picked = logp[np.arange(flat_t.size), flat_t]
    value = -(picked * flat_m).sum() / max(count, 1)

    def back(g):
        probs = np.exp(logp)
        probs[np.arange(flat_t.size), flat_t] -= 1.0
        probs *= (flat_m / max(count, 1))[:, None]
        return ((g * probs).reshape(logits.shape).astype(logits.dtype),)

    return _result(np.asarray(value, dtype=logits.dtype), (logits,), back, "cross_entropy")


BCE_CLAMP = 1e-7


def binary_cross_entropy(probs: Tensor, labels, mask=None, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on probabilities, clamped to ``[1e-7, 1 - 1e-7]``.

    Entries outside the clamp receive zero gradient.
    """
    labels = np.asarray(labels, dtype=probs.dtype)
    if labels.shape != probs.shape:
        raise DimensionError(f"binary_cross_entropy: labels {labels.shape} vs probs {probs.shape}")
    mask = np.ones(labels.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    p = np.clip(probs.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    terms = -(labels * np.log(p) + (1.0 - labels) * np.log1p(-p)) * mask
    if reduction == "mean":
        denom = max(count, 1)
    elif reduction == "sum":
        denom = 1
    else:
        raise ConfigError(f"unknown reduction {reduction!r}")
    inside = (probs.data >= BCE_CLAMP) & (probs.data <= 1.0 - BCE_CLAMP)

    def back(g):
        dp = (p - labels) / (p * (1.0 - p)) * mask * inside / denom
        return ((g * dp).astype(probs.dtype),)

    return _result(np.asarray(terms.sum() / denom, dtype=probs.dtype), (probs,), back, "bce")


def cosine(a, b) -> float:
    """Cosine similarity of two vectors; 1.0 if either has zero norm."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).reshape(-1)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"cosine: shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows(a, b) -> np.ndarray:
    """Row-wise cosine similarity over the last axis (detached, no gradient)."""
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_rows: shapes {a.shape} and {b.shape} differ")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    dot = (a * b).sum(axis=-1)
    degenerate = (na == 0.0) | (nb == 0.0)
    out = np.where(degenerate, 1.0, dot / np.where(degenerate, 1.0, na * nb))
    return np.clip(out, -1.0, 1.0)


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` with respect to ``tensor``."""
    grad = np.zeros(tensor.shape, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn().data)
            flat[i] = orig - step
            lo = float(fn().data)
            flat[i] = orig
            out[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` in the Euclidean norm; 0 when both vanish."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradcheck(fn: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> dict[int, float]:
    """Relative error between backprop and finite differences for each parameter.

    Returns a mapping from the parameter's position in ``params`` to its error.
    """
    params = list(params)
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    return {
        i: relative_error(analytic[i], numerical_gradient(fn, p, step))
        for i, p in enumerate(params)
    }
