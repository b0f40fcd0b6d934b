"""Router supervision, skip-rate schedules and the training step.

Labels come from ranking, per sequence, how little each layer's MLP changes
each token (cosine between the attention output and the MLP output); the
lowest-similarity ``floor((1 - rho_t) L S)`` (layer, token) pairs are marked
"activate".  Routers are fit to those labels with binary cross-entropy while
the task loss trains everything else.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, TrainingError
from .layers import ModelParams
from .model import RoutingMode, forward
from .router import RouterParams, RouteTrace, keep_count
from .tensor import Tensor


# ---------------------------------------------------------------- schedules


def anneal(t: int, rho_start: float, rho_target: float, anneal_steps: int) -> float:
    if anneal_steps <= 0 or t > anneal_steps:
        return rho_target
    return rho_start + (rho_target - rho_start) * t / anneal_steps


@dataclass
class SparsitySchedule:
    """Global skip-rate ramp plus the per-layer rates carried between steps.

    ``step`` counts completed steps; ``per_layer_rho`` holds the rates to be
    used by step ``step + 1``.
    """

    rho_target: float
    rho_start: float = 0.0
    anneal_steps: int = 0
    total_steps: int = 1
    per_layer_rho: list[float] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho_start <= self.rho_target < 1.0:
            raise ConfigError(
                f"need 0 <= rho_start <= rho < 1, got rho_start={self.rho_start}, rho={self.rho_target}"
            )
        if self.anneal_steps < 0 or self.total_steps < 1:
            raise ConfigError("anneal_steps must be >= 0 and total_steps >= 1")
        if any(not 0.0 <= r <= 1.0 for r in self.per_layer_rho):
            raise ConfigError("per-layer skip rates must lie in [0, 1]")

    @classmethod
    def create(cls, n_layers: int, rho_target: float, rho_start: float = 0.0, anneal_steps: int = 0,
               total_steps: int = 1) -> "SparsitySchedule":
        return cls(rho_target, rho_start, anneal_steps, total_steps, [float(rho_start)] * n_layers)

    def rho_at(self, t: int) -> float:
        return annealed_rho(t, self)

    def to_dict(self) -> dict:
        return {
            "rho_target": self.rho_target,
            "rho_start": self.rho_start,
            "anneal_steps": self.anneal_steps,
            "total_steps": self.total_steps,
            "per_layer_rho": list(self.per_layer_rho),
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SparsitySchedule":
        return cls(**d)


def annealed_rho(t: int, schedule: SparsitySchedule) -> float:
    """Linear ramp from ``rho_start`` to ``rho_target`` over ``anneal_steps``, then flat."""
    return anneal(t, schedule.rho_start, schedule.rho_target, schedule.anneal_steps)


def layer_lr(base_lr: float, layer_rho: float, rho_t: float) -> float:
    """Layers skipped less than average train faster, and vice versa."""
    if not rho_t < 1.0:
        raise ConfigError(f"global skip rate must be < 1, got {rho_t}")
    return base_lr * (1.0 - layer_rho) / (1.0 - rho_t)


def lr_multiplier(t: int, total_steps: int, warmup_ratio: float = 0.03) -> float:
    """Linear warmup then cosine decay to zero at ``total_steps``."""
    warmup = math.ceil(warmup_ratio * total_steps)
    if warmup and t <= warmup:
        return t / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, max(0.0, (t - warmup) / span))
    return 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- labels and losses


def compute_similarity(h_attn, h_full) -> np.ndarray:
    """Per-token cosine between attention output and MLP output (detached)."""
    return T.cosine_rows(h_attn, h_full)


def similarity_labels(mu, rho_t: float, valid=None) -> np.ndarray:
    """Activate the ``floor((1 - rho_t) L S)`` lowest-similarity cells of one sequence.

    ``mu`` is ``(layers, S)``; ties resolve by (layer, token) order.
    """
    mu = np.asarray(mu, dtype=np.float64)
    valid = np.ones(mu.shape[-1], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    return batch_similarity_labels(mu[:, None, :], rho_t, valid[None, :])[:, 0, :]


def batch_similarity_labels(mu, rho_t: float, valid) -> np.ndarray:
    """``similarity_labels`` applied independently to each sequence of ``(L, B, S)``."""
    if not 0.0 <= rho_t < 1.0:
        raise ConfigError(f"global skip rate must lie in [0, 1), got {rho_t}")
    mu = np.asarray(mu, dtype=np.float64)
    n_layers, b, s = mu.shape
    valid = np.asarray(valid, dtype=bool)
    cells = np.broadcast_to(valid[None], mu.shape)
    flat = np.where(cells, mu, np.inf).transpose(1, 0, 2).reshape(b, n_layers * s)
    order = np.argsort(flat, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(n_layers * s)[None].repeat(b, 0), axis=1)
    k = np.array([keep_count(rho_t, int(n)) for n in valid.sum(axis=1) * n_layers])
    labels = (ranks < k[:, None]).reshape(b, n_layers, s).transpose(1, 0, 2)
    return labels & cells


def skip_loss(probs, labels, valid=None) -> Tensor:
    """Mean binary cross-entropy between router probabilities and labels.

    ``probs`` is a list of per-layer ``(B, S)`` tensors or one ``(L, B, S)`` tensor.
    """
    if isinstance(probs, (list, tuple)):
        probs = T.stack(probs)
    labels = np.asarray(labels)
    mask = None if valid is None else np.broadcast_to(np.asarray(valid, dtype=bool), labels.shape)
    return T.binary_cross_entropy(probs, labels, mask)


def total_loss(task: Tensor, skip: Tensor) -> Tensor:
    for name, value in (("task", task), ("skip", skip)):
        if not np.isfinite(value.data).all():
            raise TrainingError(f"non-finite {name} loss: {float(value.data)}")
    return T.add(task, skip)


def update_layer_sparsity(labels, valid=None) -> float:
    """Skipped fraction of one layer's supervised labels, averaged over sequences."""
    labels = np.atleast_2d(np.asarray(labels, dtype=bool))
    valid = np.ones(labels.shape, dtype=bool) if valid is None else np.atleast_2d(np.asarray(valid, dtype=bool))
    counts = valid.sum(axis=1)
    active = (labels & valid).sum(axis=1)
    keep = counts > 0
    if not keep.any():
        return 0.0
    return float(np.mean(1.0 - active[keep] / counts[keep]))


def activated_fraction(labels, valid=None) -> float:
    """Activated share of one layer's labels: the complement of the skip rate.

    Used as a per-layer skip rate this breaks label-count conservation; tests
    keep it as a negative control.
    """
    return 1.0 - update_layer_sparsity(labels, valid)


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamW:
    """AdamW with decoupled weight decay and a per-parameter step size."""

    lr: float = 2e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_ratio: float = 0.03
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("AdamW needs lr >= 0, eps > 0, weight_decay >= 0")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ConfigError(f"AdamW betas must lie in [0, 1), got {self.betas}")
        self.betas = tuple(float(b) for b in self.betas)

    def apply(self, updates: list[tuple[str, Tensor, float, bool]]) -> None:
        """One step over ``(name, param, lr, decay)`` entries; params change in place."""
        self.step += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for name, p, lr, decay in updates:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if decay and self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def hyper(self) -> dict:
        return {
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "warmup_ratio": self.warmup_ratio,
            "step": self.step,
        }


# ---------------------------------------------------------------- training step


@dataclass
class Batch:
    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(self.tokens.shape, dtype=bool)


@dataclass
class StepMetrics:
    step: int
    task_loss: float
    skip_loss: float
    rho_t: float
    layer_rho: list[float]
    next_layer_rho: list[float]
    activations: list[int]
    tokens: int
    mean_similarity: list[float]
    lr: float
    wall_time: float

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "task_loss": self.task_loss,
            "skip_loss": self.skip_loss,
            "rho_t": self.rho_t,
            "layer_rho": self.layer_rho,
            "next_layer_rho": self.next_layer_rho,
            "activations": self.activations,
            "tokens": self.tokens,
            "mean_similarity": self.mean_similarity,
            "lr": self.lr,
            "wall_time": self.wall_time,
        }


def compute_losses(model: ModelParams, routers: RouterParams, batch: Batch, rho_t: float,
                   layer_rho) -> tuple[Tensor, Tensor, RouteTrace]:
    """Task loss, skip loss and the trace (with supervised labels) for one batch."""
    logits, trace = forward(model, batch.tokens, RoutingMode.train(layer_rho), routers, valid=batch.valid)
    task = T.cross_entropy(logits, batch.targets, batch.loss_mask & batch.valid)
    trace.supervised = batch_similarity_labels(trace.similarity, rho_t, batch.valid)
    skip = skip_loss(trace.probs, trace.supervised, batch.valid)
    return task, skip, trace


def _decays(name: str, p: Tensor) -> bool:
    return p.ndim >= 2


def train_step(model: ModelParams, routers: RouterParams, batch: Batch, schedule: SparsitySchedule,
               optim: AdamW) -> StepMetrics:
    """One optimisation step; mutates parameters, ``schedule`` and ``optim``."""
    n_layers = model.config.n_layers
    if len(schedule.per_layer_rho) != n_layers or len(routers) != n_layers:
        raise ConfigError("schedule, routers and model disagree on the layer count")
    start = time.perf_counter()
    t = schedule.step + 1
    rho_t = schedule.rho_at(t)
    layer_rho = list(schedule.per_layer_rho)

    task, skip, trace = compute_losses(model, routers, batch, rho_t, layer_rho)
    try:
        loss = total_loss(task, skip)
    except TrainingError as exc:
        raise TrainingError(f"step {t}: {exc}", trace=trace) from None

    params = model.parameters() + routers.weights
    for p in params:
        p.grad = None
    loss.backward()

    base = optim.lr * lr_multiplier(t, schedule.total_steps, optim.warmup_ratio)
    updates = [(name, p, base, _decays(name, p)) for name, p in model.named_tensors() if not name.startswith("layers.")]
    for i, layer in enumerate(model.layers):
        lr_i = layer_lr(base, layer_rho[i], rho_t)
        updates.extend((f"layers.{i}.{name}", p, lr_i, _decays(name, p)) for name, p in layer.named_tensors())
        updates.append((f"routers.{i}", routers.weights[i], lr_i, False))
    optim.apply(updates)

    valid = batch.valid
    next_rho = [update_layer_sparsity(trace.supervised[i], valid) for i in range(n_layers)]
    schedule.per_layer_rho = next_rho
    schedule.step = t
    return StepMetrics(
        step=t,
        task_loss=float(task.data),
        skip_loss=float(skip.data),
        rho_t=rho_t,
        layer_rho=layer_rho,
        next_layer_rho=next_rho,
        activations=[int(c) for c in trace.activation_counts()],
        tokens=trace.valid_tokens(),
        mean_similarity=[float(m) for m in trace.mean_similarity()],
        lr=base,
        wall_time=time.perf_counter() - start,
    )


def dense_step(model: ModelParams, batch: Batch, optim: AdamW, total_steps: int) -> float:
    """One plain fine-tuning step with every MLP on and no routers; returns the task loss.

    Used to produce the base model that gets expanded.
    """
    t = optim.step + 1
    logits, _ = forward(model, batch.tokens, RoutingMode.always_on(), valid=batch.valid)
    task = T.cross_entropy(logits, batch.targets, batch.loss_mask & batch.valid)
    if not np.isfinite(task.data):
        raise TrainingError(f"dense step {t}: non-finite task loss")
    params = model.parameters()
    for p in params:
        p.grad = None
    task.backward()
    lr = optim.lr * lr_multiplier(t, total_steps, optim.warmup_ratio)
    optim.apply([(name, p, lr, _decays(name, p)) for name, p in model.named_tensors()])
    return float(task.data)
