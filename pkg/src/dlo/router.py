"""Per-layer linear routers: decision scores, gating rules, gated layer output."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import LayerParams, attention_sublayer, mlp_sublayer
from .tensor import Tensor

DEFAULT_BETA = 2.0
DEFAULT_GAMMA = 0.05
# Beyond |z| = 12 the sigmoid is within 6e-6 of 0/1; clipping there keeps the
# decision score strictly inside its open range even in single precision.
LOGIT_CLIP = 12.0


@dataclass
class RouterParams:
    """One ``(d, 1)`` weight per layer plus the shared score range ``beta``/``gamma``."""

    weights: list[Tensor]
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError(f"router gamma must be positive, got {self.gamma}")
        if not self.beta > self.gamma:
            raise ConfigError(f"router beta ({self.beta}) must exceed gamma ({self.gamma})")

    @classmethod
    def zeros(cls, n_layers: int, d_model: int, beta: float = DEFAULT_BETA, gamma: float = DEFAULT_GAMMA):
        weights = [Tensor(np.zeros((d_model, 1), dtype=T.get_dtype()), requires_grad=True) for _ in range(n_layers)]
        return cls(weights, beta, gamma)

    @property
    def threshold(self) -> float:
        return self.beta / 2.0

    @property
    def score_range(self) -> tuple[float, float]:
        return (self.beta - self.gamma) / 2.0, (self.beta + self.gamma) / 2.0

    def __len__(self):
        return len(self.weights)

    def copy(self) -> "RouterParams":
        return RouterParams([w.clone() for w in self.weights], self.beta, self.gamma)


@dataclass
class RouteTrace:
    """Per layer and token: score, predicted label, supervised label, similarity.

    Arrays are ``(layers, batch, seq)``.  ``supervised`` is filled by the
    trainer; ``similarity`` is NaN where the MLP was not evaluated.  ``probs``
    keeps the differentiable router probabilities for the skip loss and is not
    part of any serialised form.
    """

    mode: str
    scores: np.ndarray
    predicted: np.ndarray
    similarity: np.ndarray
    valid: np.ndarray
    supervised: np.ndarray | None = None
    probs: list[Tensor] = field(default_factory=list, repr=False)

    @property
    def n_layers(self) -> int:
        return self.scores.shape[0]

    def activation_counts(self) -> np.ndarray:
        return (self.predicted & self.valid[None]).sum(axis=(1, 2))

    def valid_tokens(self) -> int:
        return int(self.valid.sum())

    def mean_similarity(self) -> np.ndarray:
        out = np.full(self.n_layers, np.nan)
        for i in range(self.n_layers):
            vals = self.similarity[i][self.valid & ~np.isnan(self.similarity[i])]
            if vals.size:
                out[i] = vals.mean()
        return out

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "scores": self.scores.tolist(),
            "predicted": self.predicted.astype(int).tolist(),
            "supervised": None if self.supervised is None else self.supervised.astype(int).tolist(),
            "similarity": np.where(np.isnan(self.similarity), None, self.similarity).tolist(),
            "valid": self.valid.astype(int).tolist(),
        }


def router_probability(h: Tensor, weight: Tensor) -> Tensor:
    """``sigmoid(h W)`` per token; ``h`` is ``(..., S, d)``, result ``(..., S)``."""
    if weight.shape != (h.shape[-1], 1):
        raise DimensionError(f"router weight {weight.shape} does not match width {h.shape[-1]}")
    z = T.matmul(h, weight)
    return T.sigmoid(T.clip(T.reshape(z, z.shape[:-1]), -LOGIT_CLIP, LOGIT_CLIP))


def score_from_probability(p: Tensor, beta: float, gamma: float) -> Tensor:
    return T.mul(T.add(T.mul(T.add(T.mul(p, 2.0), -1.0), gamma), beta), 0.5)


def decision_score(h: Tensor, weight: Tensor, beta: float = DEFAULT_BETA, gamma: float = DEFAULT_GAMMA) -> Tensor:
    """``r = (beta + (2 sigmoid(hW) - 1) gamma) / 2`` for every token."""
    return score_from_probability(router_probability(h, weight), beta, gamma)


def keep_count(rho: float, n: int) -> int:
    """``floor((1 - rho) n)``, robust to binary rounding of ``rho``."""
    return max(0, min(n, math.floor((1.0 - rho) * n + 1e-9)))


def gate_inference(scores, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Activated iff ``r >= beta / 2`` (boundary inclusive)."""
    scores = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return scores >= beta / 2.0


def _topk_one(scores: np.ndarray, rho: float, valid: np.ndarray) -> np.ndarray:
    idx = np.flatnonzero(valid)
    k = keep_count(rho, idx.size)
    labels = np.zeros(scores.shape, dtype=bool)
    if k:
        order = np.argsort(-scores[idx], kind="stable")
        labels[idx[order[:k]]] = True
    return labels


def gate_train_topk(scores, rho: float, valid=None) -> np.ndarray:
    """Training-time gate: the ``floor((1 - rho) S)`` highest scores per sequence.

    ``scores`` is ``(S,)`` or ``(B, S)``; ties go to the lower token index.
    Positions with ``valid == False`` are never selected and do not count
    towards ``S``.
    """
    if not 0.0 <= rho < 1.0 + 1e-12:
        raise ConfigError(f"layer skip rate must lie in [0, 1], got {rho}")
    scores = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    scores = scores.astype(np.float64)
    valid = np.ones(scores.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if scores.ndim == 1:
        return _topk_one(scores, rho, valid)
    # invalid positions sort last; stable sort keeps ties in index order
    keyed = np.where(valid, -scores, np.inf)
    order = np.argsort(keyed, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(scores.shape[-1])[None].repeat(len(scores), 0), axis=-1)
    k = np.array([keep_count(rho, int(n)) for n in valid.sum(axis=-1)])
    return (ranks < k[:, None]) & valid


def combine_gated(attn_out: Tensor, full_out: Tensor, scores: Tensor, labels) -> Tensor:
    """``r * M(A(h))`` on activated tokens, ``A(h)`` on skipped ones."""
    mask = np.asarray(labels, dtype=attn_out.dtype)
    if mask.shape != attn_out.shape[:-1]:
        raise DimensionError(f"labels {mask.shape} do not align with tokens {attn_out.shape[:-1]}")
    active = T.scale_rows(full_out, T.mul(scores, Tensor(mask, dtype=attn_out.dtype)))
    passthrough = T.scale_rows(attn_out, Tensor(1.0 - mask, dtype=attn_out.dtype))
    return T.add(active, passthrough)


def apply_gate(h: Tensor, layer: LayerParams, n_heads: int, scores: Tensor, labels) -> Tensor:
    """Gated layer output for every token of ``h``."""
    a = attention_sublayer(h, layer, n_heads)
    return combine_gated(a, mlp_sublayer(a, layer), scores, labels)
