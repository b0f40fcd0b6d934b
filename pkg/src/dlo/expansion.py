"""Group-based depth expansion of a trained model.

The ``R`` source layers are split into ``P`` contiguous groups of ``Q``; each
group gets ``q`` new layers appended after its originals, so the result has
``P * (Q + q)`` layers.  New layers are initialised from their predecessors in
the final ordering (so with ``q > 1`` the second new layer looks back at the
first one).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InitError
from .layers import LayerParams, ModelParams
from .router import RouterParams
from .tensor import Tensor

POLICIES = ("random", "copy", "identity", "linear", "slerp")
SLERP_EPS = 1e-7


@dataclass(frozen=True)
class ExpansionSpec:
    groups: int
    per_group: int
    policy: str = "identity"
    tau: int = 2
    alphas: tuple[float, ...] | None = None
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown expansion policy {self.policy!r}; expected one of {POLICIES}")
        if self.groups < 1:
            raise ConfigError("expansion needs at least one group")
        if self.per_group < 0:
            raise ConfigError("per_group must be non-negative")
        if self.tau < 1:
            raise ConfigError("merge window tau must be at least 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"slerp alpha must lie in [0, 1], got {self.alpha}")
        if self.policy == "linear":
            weights = self.merge_weights
            if len(weights) != self.tau:
                raise ConfigError(f"linear merge needs {self.tau} weights, got {len(weights)}")
            if abs(sum(weights) - 1.0) > 1e-9:
                raise ConfigError(f"linear merge weights must sum to 1, got {sum(weights)}")

    @property
    def merge_weights(self) -> tuple[float, ...]:
        """``alphas`` for the linear policy, uniform ``1/tau`` when unset."""
        if self.alphas is not None:
            return tuple(float(a) for a in self.alphas)
        return (1.0 / self.tau,) * self.tau

    def group_size(self, n_layers: int) -> int:
        if n_layers % self.groups:
            raise ConfigError(f"{n_layers} layers cannot be split into {self.groups} equal groups")
        q_size = n_layers // self.groups
        if self.policy in ("linear", "slerp") and self.tau > q_size:
            raise ConfigError(f"merge window tau={self.tau} exceeds group size Q={q_size}")
        return q_size

    def expanded_layers(self, n_layers: int) -> int:
        return self.groups * (self.group_size(n_layers) + self.per_group)

    def to_dict(self) -> dict:
        return {
            "groups": self.groups,
            "per_group": self.per_group,
            "policy": self.policy,
            "tau": self.tau,
            "alphas": None if self.alphas is None else list(self.alphas),
            "alpha": self.alpha,
            "seed": self.seed,
        }


def layer_map(spec: ExpansionSpec, n_layers: int) -> list[int | None]:
    """Source index for each output layer, ``None`` for new layers."""
    q_size = spec.group_size(n_layers)
    out: list[int | None] = []
    for g in range(spec.groups):
        out.extend(range(g * q_size, (g + 1) * q_size))
        out.extend([None] * spec.per_group)
    return out


def xavier_bound(shape) -> float:
    n_in, n_out = shape
    return float(np.sqrt(6.0 / (n_in + n_out)))


def init_random(shape, rng: np.random.Generator) -> Tensor:
    """Xavier-uniform matrix on ``+-sqrt(6 / (n_in + n_out))``."""
    if len(shape) != 2:
        raise InitError(f"Xavier initialisation needs a 2-D shape, got {tuple(shape)}")
    bound = xavier_bound(shape)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)).astype(T.get_dtype()), requires_grad=True)


def init_random_layer(template: LayerParams, rng: np.random.Generator) -> LayerParams:
    def fresh(name, t):
        if t.ndim == 2:
            return init_random(t.shape, rng)
        return Tensor(np.ones(t.shape, dtype=t.dtype), requires_grad=True)

    return template.map(fresh)


def init_copy(preceding: list[LayerParams]) -> LayerParams:
    """Deep copy of the immediately preceding layer."""
    if not preceding:
        raise InitError("copy initialisation needs a preceding layer")
    return preceding[-1].copy()


def init_identity(preceding: list[LayerParams]) -> LayerParams:
    """Copy of the preceding layer with both residual-branch outputs zeroed."""
    layer = init_copy(preceding)
    layer.w_out = Tensor(np.zeros_like(layer.w_out.data), requires_grad=True)
    layer.w_down = Tensor(np.zeros_like(layer.w_down.data), requires_grad=True)
    return layer


def init_linear_merge(preceding: list[LayerParams], tau: int, alphas) -> LayerParams:
    """``sum_k alphas[k-1] * theta_{k back}`` per parameter tensor (k=1 is the nearest)."""
    alphas = [float(a) for a in alphas]
    if len(alphas) != tau:
        raise ConfigError(f"need {tau} merge weights, got {len(alphas)}")
    if abs(sum(alphas) - 1.0) > 1e-9:
        raise ConfigError(f"merge weights must sum to 1, got {sum(alphas)}")
    if len(preceding) < tau:
        raise InitError(f"linear merge over {tau} layers but only {len(preceding)} precede")
    window = [preceding[-k] for k in range(1, tau + 1)]

    def merged(name, _):
        acc = sum(a * getattr(layer, name).data.astype(np.float64) for a, layer in zip(alphas, window))
        return Tensor(acc.astype(window[0].w_out.dtype), requires_grad=True)

    return window[0].map(merged)


def slerp(u, v, alpha: float) -> np.ndarray:
    """Spherical interpolation between two flattened weight vectors.

    Falls back to linear interpolation when ``sin(omega) < 1e-7``.
    """
    u_arr = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64)
    v_arr = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    if u_arr.shape != v_arr.shape:
        raise InitError(f"slerp operands differ in shape: {u_arr.shape} vs {v_arr.shape}")
    uf, vf = u_arr.reshape(-1), v_arr.reshape(-1)
    nu, nv = np.linalg.norm(uf), np.linalg.norm(vf)
    if nu == 0.0 or nv == 0.0:
        raise InitError("slerp is undefined for zero-norm vectors")
    omega = np.arccos(np.clip(uf @ vf / (nu * nv), -1.0, 1.0))
    sin_omega = np.sin(omega)
    if sin_omega < SLERP_EPS:
        out = (1.0 - alpha) * uf + alpha * vf
    else:
        out = np.sin((1.0 - alpha) * omega) / sin_omega * uf + np.sin(alpha * omega) / sin_omega * vf
    return out.reshape(u_arr.shape)


def init_slerp(preceding: list[LayerParams], tau: int, alpha: float) -> LayerParams:
    """Per-tensor SLERP between the nearest predecessor and the one ``tau`` back."""
    if len(preceding) < tau:
        raise InitError(f"slerp over {tau} layers but only {len(preceding)} precede")
    near, far = preceding[-1], preceding[-tau]

    def merged(name, t):
        return Tensor(slerp(t, getattr(far, name), alpha).astype(t.dtype), requires_grad=True)

    return near.map(merged)


def _new_layer(spec: ExpansionSpec, preceding: list[LayerParams], rng) -> LayerParams:
    if spec.policy == "random":
        return init_random_layer(preceding[-1], rng)
    if spec.policy == "copy":
        return init_copy(preceding)
    if spec.policy == "identity":
        return init_identity(preceding)
    if spec.policy == "linear":
        return init_linear_merge(preceding, spec.tau, spec.merge_weights)
    return init_slerp(preceding, spec.tau, spec.alpha)


def expand(model: ModelParams, spec: ExpansionSpec) -> ModelParams:
    """Expanded copy of ``model``; the source is never mutated."""
    n = model.config.n_layers
    q_size = spec.group_size(n)
    rng = np.random.default_rng(spec.seed)
    layers: list[LayerParams] = []
    for g in range(spec.groups):
        group = [model.layers[g * q_size + j].copy() for j in range(q_size)]
        for _ in range(spec.per_group):
            group.append(_new_layer(spec, group, rng))
        layers.extend(group)
    return ModelParams(
        config=model.config.replace(n_layers=len(layers)),
        embed=model.embed.clone(),
        pos=model.pos.clone(),
        layers=layers,
        final_norm=model.final_norm.clone(),
        head=model.head.clone(),
    )


def expand_routers(routers: RouterParams | None, spec: ExpansionSpec, n_layers: int, d_model: int) -> RouterParams:
    """Original layers keep their routers (zeros if none); new layers get zero routers."""
    if routers is None:
        routers = RouterParams.zeros(n_layers, d_model)
    weights = []
    for src in layer_map(spec, n_layers):
        if src is None:
            weights.append(Tensor(np.zeros((d_model, 1), dtype=routers.weights[0].dtype), requires_grad=True))
        else:
            weights.append(routers.weights[src].clone())
    return RouterParams(weights, routers.beta, routers.gamma)
