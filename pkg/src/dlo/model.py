"""Full forward pass with per-layer MLP gating."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .layers import ModelParams, attention_sublayer, embed_tokens, mlp_sublayer, output_logits
from .router import (
    RouterParams,
    RouteTrace,
    combine_gated,
    gate_inference,
    gate_train_topk,
    router_probability,
    score_from_probability,
)
from .tensor import Tensor


@dataclass(frozen=True)
class RoutingMode:
    """How each layer decides which tokens run their MLP.

    ``always-on``: every token, no score rescaling (plain dense model).
    ``train``: per-sequence top-k on scores with per-layer skip rates ``layer_rho``.
    ``inference``: threshold ``r >= beta / 2``.
    ``random``: skip each (layer, token) independently with probability ``rates[i]``.
    """

    kind: str
    layer_rho: tuple[float, ...] | None = None
    rates: tuple[float, ...] | None = None
    seed: int = 0

    KINDS = ("always-on", "train", "inference", "random")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown routing mode {self.kind!r}")
        if self.kind == "train" and self.layer_rho is None:
            raise ConfigError("train routing needs per-layer skip rates")
        if self.kind == "random":
            if self.rates is None:
                raise ConfigError("random routing needs skip rates")
            if any(not 0.0 <= r <= 1.0 for r in self.rates):
                raise ConfigError(f"random skip rates must lie in [0, 1], got {self.rates}")

    @classmethod
    def always_on(cls):
        return cls("always-on")

    @classmethod
    def inference(cls):
        return cls("inference")

    @classmethod
    def train(cls, layer_rho):
        return cls("train", layer_rho=tuple(float(r) for r in layer_rho))

    @classmethod
    def random(cls, rates, seed: int = 0):
        return cls("random", rates=tuple(float(r) for r in rates), seed=seed)

    @classmethod
    def parse(cls, text: str, n_layers: int, seed: int = 0) -> "RoutingMode":
        """Parse ``inference``, ``always-on`` or ``random:<rate>[,<rate>...]``."""
        if text in ("inference", "always-on"):
            return cls(text)
        if text.startswith("random:"):
            try:
                rates = [float(x) for x in text[len("random:"):].split(",")]
            except ValueError:
                raise ConfigError(f"bad random routing spec {text!r}") from None
            if len(rates) == 1:
                rates = rates * n_layers
            if len(rates) != n_layers:
                raise ConfigError(f"random routing lists {len(rates)} rates for {n_layers} layers")
            return cls.random(rates, seed)
        raise ConfigError(f"unknown routing mode {text!r}; use inference, always-on or random:<rate>")

    def rates_for(self, n_layers: int) -> tuple[float, ...]:
        values = self.layer_rho if self.kind == "train" else self.rates
        if values is not None and len(values) != n_layers:
            raise ConfigError(f"routing gives {len(values)} rates for a {n_layers}-layer model")
        return values


def _sparse_mlp(a: Tensor, layer, scores: Tensor, labels: np.ndarray) -> Tensor:
    d = a.shape[-1]
    flat = a.data.reshape(-1, d)
    out = flat.copy()
    idx = np.flatnonzero(labels.reshape(-1))
    if idx.size:
        full = mlp_sublayer(Tensor(flat[idx]), layer).data
        out[idx] = full * scores.data.reshape(-1)[idx, None]
    return Tensor(out.reshape(a.shape))


def forward(
    model: ModelParams,
    tokens,
    routing: RoutingMode | None = None,
    routers: RouterParams | None = None,
    valid=None,
    with_similarity: bool | None = None,
) -> tuple[Tensor, RouteTrace]:
    """Logits ``(B, S, V)`` (or ``(S, V)`` for 1-D input) and the route trace.

    In ``inference`` and ``random`` modes without ``with_similarity`` and
    outside a gradient context, MLPs run only on activated tokens.
    """
    cfg = model.config
    routing = routing or RoutingMode.always_on()
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None]
    if tokens.ndim != 2 or not np.issubdtype(tokens.dtype, np.integer):
        raise InputError(f"tokens must be an integer array of shape (S,) or (B, S), got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise InputError(f"token id out of range for vocabulary of {cfg.vocab}")
    b, s = tokens.shape
    if s > cfg.max_seq:
        raise InputError(f"sequence length {s} exceeds max_seq={cfg.max_seq}")
    valid = np.ones((b, s), dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(b, s)
    if routers is None:
        routers = RouterParams.zeros(cfg.n_layers, cfg.d_model)
    if len(routers) != cfg.n_layers:
        raise ConfigError(f"{len(routers)} routers for a {cfg.n_layers}-layer model")
    rates = routing.rates_for(cfg.n_layers)
    if with_similarity is None:
        with_similarity = routing.kind in ("always-on", "train")
    sparse = not with_similarity and not T.grad_enabled() and routing.kind in ("inference", "random")
    rng = np.random.default_rng(routing.seed) if routing.kind == "random" else None

    n = cfg.n_layers
    scores = np.zeros((n, b, s))
    predicted = np.zeros((n, b, s), dtype=bool)
    similarity = np.full((n, b, s), np.nan)
    probs = []

    h = embed_tokens(model, tokens)
    for i, layer in enumerate(model.layers):
        p = router_probability(h, routers.weights[i])
        r = score_from_probability(p, routers.beta, routers.gamma)
        probs.append(p)
        scores[i] = r.data
        a = attention_sublayer(h, layer, cfg.n_heads)

        if routing.kind == "always-on":
            labels = valid.copy()
        elif routing.kind == "train":
            labels = gate_train_topk(r.data, rates[i], valid)
        elif routing.kind == "inference":
            labels = gate_inference(r.data, routers.beta) & valid
        else:
            labels = (rng.random((b, s)) >= rates[i]) & valid
        predicted[i] = labels

        if sparse:
            h = _sparse_mlp(a, layer, r, labels)
            continue
        full = mlp_sublayer(a, layer)
        similarity[i] = T.cosine_rows(a, full)
        h = full if routing.kind == "always-on" else combine_gated(a, full, r, labels)

    logits = output_logits(model, h)
    if squeeze:
        logits = T.reshape(logits, logits.shape[1:])
    trace = RouteTrace(routing.kind, scores, predicted, similarity, valid, probs=probs)
    return logits, trace
