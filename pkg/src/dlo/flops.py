"""Analytic inference FLOPs for a decoder-only transformer with MLP skipping.

Per layer and sequence of ``S`` tokens (multiply-add counted as 2 FLOPs):

* attention projections ``2 S (4 d^2)``
* attention scores and weighted values ``4 S^2 d`` (no causal halving)
* softmax ``5 S^2 h`` (max, subtract, exp, sum, divide per score and head)
* SwiGLU MLP ``2 S (3 d d_ff)``

plus the output head ``2 S d V``.  Skipping removes a layer's MLP term for
the skipped share of tokens; nothing else is ever skipped.

The LLaMA2 widths below are public architecture constants (d=4096,
d_ff=11008, V=32000, 32 heads, 32 layers); the 40-layer preset is the same
model after appending two layers to each of four groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SOFTMAX_FLOPS_PER_SCORE = 5
TERA = 1e12


@dataclass(frozen=True)
class ArchSpec:
    d_model: int
    n_layers: int
    d_ff: int
    vocab: int
    n_heads: int

    def __post_init__(self):
        for name in ("d_model", "n_layers", "d_ff", "vocab", "n_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ArchSpec.{name} must be positive")

    @classmethod
    def from_model_config(cls, config) -> "ArchSpec":
        return cls(config.d_model, config.n_layers, config.d_ff, config.vocab, config.n_heads)


ARCH_PRESETS: dict[str, ArchSpec] = {
    "llama2-7b": ArchSpec(d_model=4096, n_layers=32, d_ff=11008, vocab=32000, n_heads=32),
    "dlo-8b": ArchSpec(d_model=4096, n_layers=40, d_ff=11008, vocab=32000, n_heads=32),
    "llama-pro-8b": ArchSpec(d_model=4096, n_layers=40, d_ff=11008, vocab=32000, n_heads=32),
}


def get_arch(name: str) -> ArchSpec:
    try:
        return ARCH_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown architecture preset {name!r}; known: {sorted(ARCH_PRESETS)}") from None


@dataclass
class FlopsReport:
    arch: ArchSpec
    seq_len: int
    attn_proj: int
    attn_scores: int
    attn_softmax: int
    mlp: int
    head: int
    rho_hat: list[float] = field(default_factory=list)

    @property
    def attention_per_layer(self) -> int:
        return self.attn_proj + self.attn_scores + self.attn_softmax

    @property
    def mlp_per_layer(self) -> int:
        return self.mlp

    @property
    def dense_total(self) -> int:
        return self.arch.n_layers * (self.attention_per_layer + self.mlp) + self.head

    @property
    def layer_mlp(self) -> list[float]:
        """MLP FLOPs actually spent in each layer."""
        return [(1.0 - r) * self.mlp for r in self.rho_hat]

    @property
    def sparse_total(self) -> float:
        return self.arch.n_layers * self.attention_per_layer + sum(self.layer_mlp) + self.head

    @property
    def saved(self) -> float:
        return self.dense_total - self.sparse_total

    def to_dict(self) -> dict:
        return {
            "arch": vars(self.arch),
            "seq_len": self.seq_len,
            "attention_per_layer": self.attention_per_layer,
            "mlp_per_layer": self.mlp,
            "head": self.head,
            "dense_total": self.dense_total,
            "sparse_total": self.sparse_total,
            "rho_hat": list(self.rho_hat),
        }


def flops_dense(arch: ArchSpec, seq_len: int) -> FlopsReport:
    return flops_sparse(arch, seq_len, 0.0)


def flops_sparse(arch: ArchSpec, seq_len: int, rho_hat) -> FlopsReport:
    """FLOPs when layer ``i`` skips its MLP for a ``rho_hat[i]`` share of tokens.

    ``rho_hat`` is a scalar (uniform) or one value per layer.
    """
    if seq_len < 0:
        raise ConfigError("sequence length must be non-negative")
    rho = np.broadcast_to(np.asarray(rho_hat, dtype=np.float64), (arch.n_layers,))
    if ((rho < 0) | (rho > 1)).any():
        raise ConfigError("realised sparsity must lie in [0, 1]")
    d, s = arch.d_model, seq_len
    return FlopsReport(
        arch=arch,
        seq_len=s,
        attn_proj=2 * s * 4 * d * d,
        attn_scores=4 * s * s * d,
        attn_softmax=SOFTMAX_FLOPS_PER_SCORE * arch.n_heads * s * s,
        mlp=2 * s * 3 * d * arch.d_ff,
        head=2 * s * d * arch.vocab,
        rho_hat=[float(r) for r in rho],
    )


def realized_sparsity(trace) -> list[float]:
    """Share of valid tokens whose MLP was skipped, per layer."""
    valid = trace.valid
    n = valid.sum()
    if n == 0:
        return [0.0] * trace.n_layers
    skipped = (~trace.predicted & valid[None]).sum(axis=(1, 2))
    return [float(k / n) for k in skipped]


def format_report(report: FlopsReport) -> str:
    a = report.arch
    mean_rho = float(np.mean(report.rho_hat)) if report.rho_hat else 0.0
    rows = [
        ("layers", f"{a.n_layers}"),
        ("width / ff / vocab", f"{a.d_model} / {a.d_ff} / {a.vocab}"),
        ("sequence length", f"{report.seq_len}"),
        ("attention / layer", f"{report.attention_per_layer / TERA:.4f}T"),
        ("mlp / layer", f"{report.mlp / TERA:.4f}T"),
        ("head", f"{report.head / TERA:.4f}T"),
        ("mean sparsity", f"{mean_rho:.3f}"),
        ("dense total", f"{report.dense_total / TERA:.1f}T ({report.dense_total:.4e})"),
        ("sparse total", f"{report.sparse_total / TERA:.1f}T ({report.sparse_total:.4e})"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)
