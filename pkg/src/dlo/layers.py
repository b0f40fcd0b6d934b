"""Decoder-only transformer parameters and the two sublayer functions.

A layer is split into an attention sublayer ``A(h) = h + MHSA(norm1(h))``
and an MLP sublayer ``M(x) = x + down(silu(gate(norm2(x))) * up(norm2(x)))`` so
that a router can sit between them.  Residuals and pre-norms live inside the
sublayers, which makes "skip the MLP" leave a valid residual stream.

Positions use a learned absolute embedding table (``ModelParams.pos``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

ATTN_NAMES = ("wq", "wk", "wv", "w_out")
MLP_NAMES = ("w_gate", "w_up", "w_down")
NORM_NAMES = ("norm1", "norm2")
LAYER_TENSORS = tuple(f"attn.{n}" for n in ATTN_NAMES) + tuple(f"mlp.{n}" for n in MLP_NAMES) + NORM_NAMES


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    d_ff: int
    n_layers: int
    vocab: int
    max_seq: int

    def __post_init__(self):
        for name in ("d_model", "n_heads", "d_ff", "n_layers", "vocab", "max_seq"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"ModelConfig.{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


MODEL_PRESETS: dict[str, ModelConfig] = {
    # gradient-check scale
    "tiny": ModelConfig(d_model=8, n_heads=2, d_ff=16, n_layers=2, vocab=16, max_seq=8),
    # function-preservation scale
    "toy": ModelConfig(d_model=64, n_heads=4, d_ff=128, n_layers=8, vocab=128, max_seq=32),
    # 32 layers like the LLaMA2-7B backbone, at desk width
    "toy-32": ModelConfig(d_model=16, n_heads=2, d_ff=32, n_layers=32, vocab=32, max_seq=16),
    # end-to-end modular addition base model (expanded 4 -> 6)
    "modadd": ModelConfig(d_model=64, n_heads=4, d_ff=128, n_layers=4, vocab=99, max_seq=8),
}


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    w_out: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    norm1: Tensor
    norm2: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(name, getattr(self, name.split(".")[-1])) for name in LAYER_TENSORS]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def copy(self) -> "LayerParams":
        return LayerParams(**{f.name: getattr(self, f.name).clone() for f in dataclasses.fields(self)})

    def map(self, fn) -> "LayerParams":
        """New layer whose every tensor is ``fn(field_name, tensor)``."""
        return LayerParams(**{f.name: fn(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)})


@dataclass
class ModelParams:
    config: ModelConfig
    embed: Tensor
    pos: Tensor
    layers: list[LayerParams]
    final_norm: Tensor
    head: Tensor

    def __post_init__(self):
        if len(self.layers) != self.config.n_layers:
            raise ConfigError(f"config says {self.config.n_layers} layers, got {len(self.layers)}")

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "embed", self.embed
        yield "pos", self.pos
        for i, layer in enumerate(self.layers):
            for name, t in layer.named_tensors():
                yield f"layers.{i}.{name}", t
        yield "final_norm", self.final_norm
        yield "head", self.head

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            embed=self.embed.clone(),
            pos=self.pos.clone(),
            layers=[layer.copy() for layer in self.layers],
            final_norm=self.final_norm.clone(),
            head=self.head.clone(),
        )


def _param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=T.get_dtype()), requires_grad=True)


def init_layer(config: ModelConfig, rng: np.random.Generator) -> LayerParams:
    d, f = config.d_model, config.d_ff
    out_scale = 1.0 / np.sqrt(2.0 * config.n_layers)

    def normal(n_in, n_out, scale=1.0):
        return _param(rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out)))

    return LayerParams(
        wq=normal(d, d),
        wk=normal(d, d),
        wv=normal(d, d),
        w_out=normal(d, d, out_scale),
        w_gate=normal(d, f),
        w_up=normal(d, f),
        w_down=normal(f, d, out_scale),
        norm1=_param(np.ones(d)),
        norm2=_param(np.ones(d)),
    )


def init_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d = config.d_model
    embed = _param(rng.normal(0.0, 1.0, size=(config.vocab, d)))
    pos = _param(rng.normal(0.0, 0.1, size=(config.max_seq, d)))
    layers = [init_layer(config, rng) for _ in range(config.n_layers)]
    head = _param(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, config.vocab)))
    return ModelParams(config, embed, pos, layers, _param(np.ones(d)), head)


def attention_sublayer(h: Tensor, layer: LayerParams, n_heads: int) -> Tensor:
    """``h + MHSA(rms_norm(h))`` for ``h`` of shape ``(..., S, d)``."""
    x = T.rms_norm(h, layer.norm1)
    q = T.matmul(x, layer.wq)
    k = T.matmul(x, layer.wk)
    v = T.matmul(x, layer.wv)
    attn = T.causal_softmax_attention(q, k, v, n_heads)
    return T.add(h, T.matmul(attn, layer.w_out))


def mlp_sublayer(x: Tensor, layer: LayerParams) -> Tensor:
    """SwiGLU feed-forward with residual, applied independently per token."""
    n = T.rms_norm(x, layer.norm2)
    hidden = T.mul(T.silu(T.matmul(n, layer.w_gate)), T.matmul(n, layer.w_up))
    return T.add(x, T.matmul(hidden, layer.w_down))


def embed_tokens(model: ModelParams, tokens: np.ndarray) -> Tensor:
    s = tokens.shape[-1]
    return T.add(T.embedding(model.embed, tokens), T.embedding(model.pos, np.arange(s)))


def output_logits(model: ModelParams, h: Tensor) -> Tensor:
    return T.matmul(T.rms_norm(h, model.final_norm), model.head)
