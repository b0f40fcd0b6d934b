"""Training runs, evaluation and route-trace export built on the core modules."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import checkpoint
from . import tensor as T
from .config import RunConfig
from .errors import ConfigError, OutputError, TrainingError
from .expansion import expand, expand_routers
from .flops import ArchSpec, flops_sparse
from .layers import ModelParams, init_model
from .model import RoutingMode, forward
from .router import RouterParams
from .tasks import Split, TaskData, generate, iter_batches
from .trainer import AdamW, SparsitySchedule, dense_step, train_step

log = logging.getLogger("dlo")

METRICS_FILE = "metrics.jsonl"
FINAL_CHECKPOINT = "final.dlo"
NAN_TRACE_FILE = "nan_trace.json"
LOCK_FILE = ".lock"

# independent streams derived from the run seed
_PRETRAIN_STREAM = 1
_TRAIN_STREAM = 2


@dataclass
class RunState:
    model: ModelParams
    routers: RouterParams
    schedule: SparsitySchedule
    optim: AdamW
    provenance: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    loss: float
    accuracy: float
    rho_hat: list[float]
    flops: float
    dense_flops: float
    tokens: int
    routing: str

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "accuracy": self.accuracy,
            "rho_hat": self.rho_hat,
            "mean_rho_hat": float(np.mean(self.rho_hat)) if self.rho_hat else 0.0,
            "flops": self.flops,
            "dense_flops": self.dense_flops,
            "tokens": self.tokens,
            "routing": self.routing,
        }


def cast_model(model: ModelParams, routers: RouterParams | None = None) -> None:
    """Convert every tensor to the active precision in place."""
    dtype = T.get_dtype()
    tensors = [t for _, t in model.named_tensors()] + ([] if routers is None else routers.weights)
    for t in tensors:
        if t.data.dtype != dtype:
            t.data = t.data.astype(dtype)


def pretrain(model: ModelParams, config: RunConfig, data: TaskData) -> list[float]:
    """Dense fine-tuning of the base model; returns the per-step task losses."""
    section = config.pretrain
    opt = config.optimizer
    optim = AdamW(lr=section.lr, betas=opt.betas, eps=opt.eps, weight_decay=section.weight_decay,
                  warmup_ratio=opt.warmup_ratio)
    batches = iter_batches(data.train, section.batch_size or config.batch_size, config.seed + _PRETRAIN_STREAM)
    losses = []
    for step in range(section.steps):
        losses.append(dense_step(model, next(batches), optim, section.steps))
        if (step + 1) % 500 == 0:
            log.info("pretrain step %d loss %.4f", step + 1, losses[-1])
    return losses


def build_initial(config: RunConfig, data: TaskData | None = None) -> RunState:
    """Base model (fresh or loaded), optional dense pretraining, then expansion."""
    T.set_precision(config.precision)
    data = data or generate(config.task_spec())
    provenance: dict = {"seed": config.seed, "task": config.task_spec().to_dict()}
    routers = None
    if config.init_checkpoint is not None:
        ckpt = checkpoint.load(config.init_checkpoint)
        model, routers = ckpt.model, ckpt.routers
        cast_model(model, routers)
        provenance["init_checkpoint"] = str(config.init_checkpoint)
    else:
        model = init_model(config.base_model_config(), config.seed)
    if config.pretrain.steps:
        losses = pretrain(model, config, data)
        provenance["pretrain"] = {"steps": config.pretrain.steps, "final_loss": losses[-1]}

    spec = config.expansion_spec()
    if spec is not None:
        n_before = model.config.n_layers
        routers = expand_routers(routers, spec, n_before, model.config.d_model)
        model = expand(model, spec)
        provenance["expansion"] = spec.to_dict() | {"layers_before": n_before, "layers_after": model.config.n_layers}

    cfg = model.config
    beta, gamma = config.router.beta, config.router.gamma
    if routers is None:
        routers = RouterParams.zeros(cfg.n_layers, cfg.d_model, beta, gamma)
    else:
        routers = RouterParams(routers.weights, beta, gamma)
    schedule = SparsitySchedule.create(cfg.n_layers, config.sparsity.rho, config.sparsity.rho_start,
                                       config.anneal_steps(), config.steps)
    opt = config.optimizer
    optim = AdamW(lr=opt.lr, betas=opt.betas, eps=opt.eps, weight_decay=opt.weight_decay,
                  warmup_ratio=opt.warmup_ratio)
    return RunState(model, routers, schedule, optim, provenance)


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(json.dumps(obj, indent=1))
        os.replace(tmp, path)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from None


@dataclass
class RunResult:
    state: RunState
    records: list[dict]
    report: EvalReport
    output_dir: Path


def run_training(config: RunConfig) -> RunResult:
    """Run ``config.steps`` DLO steps, writing metrics and checkpoints to ``output_dir``.

    The output directory is locked for the whole run.  A directory that
    already holds a metrics stream is refused so records are never mixed.
    """
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {out}: {exc}") from None
    lock = FileLock(str(out / LOCK_FILE))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise OutputError(f"{out} is locked by another training run") from None
    try:
        metrics_path = out / METRICS_FILE
        if metrics_path.exists():
            raise OutputError(f"{metrics_path} already exists; use a fresh output directory")
        return _train_locked(config, out, metrics_path)
    finally:
        lock.release()


def _train_locked(config: RunConfig, out: Path, metrics_path: Path) -> RunResult:
    data = generate(config.task_spec())
    state = build_initial(config, data)
    _write_json(out / "config.json", config.to_dict())
    batches = iter_batches(data.train, config.batch_size, config.seed + _TRAIN_STREAM)
    records = []
    started = time.perf_counter()
    try:
        fh = open(metrics_path, "w")
    except OSError as exc:
        raise OutputError(f"cannot open {metrics_path}: {exc}") from None
    with fh:
        for _ in range(config.steps):
            try:
                metrics = train_step(state.model, state.routers, next(batches), state.schedule, state.optim)
            except TrainingError as exc:
                if exc.trace is not None:
                    _write_json(out / NAN_TRACE_FILE, exc.trace.to_dict())
                log.error("%s; route trace written to %s", exc, out / NAN_TRACE_FILE)
                raise
            record = metrics.to_record()
            records.append(record)
            fh.write(json.dumps(record) + "\n")
            fh.flush()
            step = metrics.step
            if config.checkpoint_every and step % config.checkpoint_every == 0 and step < config.steps:
                _save_state(out / f"step-{step:06d}.dlo", state)
            if config.eval_every and step % config.eval_every == 0:
                rep = evaluate(state.model, state.routers, data.eval)
                log.info("step %d eval loss %.4f acc %.4f rho_hat %.3f", step, rep.loss, rep.accuracy,
                         np.mean(rep.rho_hat))
            elif step % 100 == 0:
                log.info("step %d task %.4f skip %.4f rho_t %.3f", step, metrics.task_loss, metrics.skip_loss,
                         metrics.rho_t)
    _save_state(out / FINAL_CHECKPOINT, state)
    report = evaluate(state.model, state.routers, data.eval)
    _write_json(out / "eval.json", report.to_dict())
    log.info("finished %d steps in %.1fs", config.steps, time.perf_counter() - started)
    return RunResult(state, records, report, out)


def _save_state(path: Path, state: RunState) -> None:
    checkpoint.save(path, state.model, state.routers, state.schedule, state.optim, state.provenance)


def _chunks(split: Split, batch_size: int):
    for start in range(0, len(split), batch_size):
        yield split.batch(slice(start, start + batch_size))


def evaluate(model: ModelParams, routers: RouterParams | None, split: Split, routing: RoutingMode | None = None,
             batch_size: int = 1024) -> EvalReport:
    """Masked token loss and accuracy, realised per-layer skip rates and their FLOPs."""
    routing = routing or RoutingMode.inference()
    n_layers = model.config.n_layers
    loss_sum = 0.0
    correct = 0
    counted = 0
    skipped = np.zeros(n_layers, dtype=np.int64)
    valid_tokens = 0
    for k, batch in enumerate(_chunks(split, batch_size)):
        mode = routing
        if routing.kind == "random":
            # a distinct but reproducible draw per chunk
            mode = RoutingMode.random(routing.rates, seed=routing.seed * 1_000_003 + k)
        with T.no_grad():
            logits, trace = forward(model, batch.tokens, mode, routers, valid=batch.valid, with_similarity=False)
        mask = batch.loss_mask & batch.valid
        n = int(mask.sum())
        if n:
            loss_sum += T.cross_entropy(logits, batch.targets, mask).item() * n
            correct += int(((logits.data.argmax(-1) == batch.targets) & mask).sum())
            counted += n
        skipped += (~trace.predicted & trace.valid[None]).sum(axis=(1, 2))
        valid_tokens += trace.valid_tokens()
    rho_hat = [float(s / valid_tokens) if valid_tokens else 0.0 for s in skipped]
    arch = ArchSpec.from_model_config(model.config)
    report = flops_sparse(arch, split.tokens.shape[1], rho_hat)
    return EvalReport(
        loss=loss_sum / counted if counted else float("nan"),
        accuracy=correct / counted if counted else float("nan"),
        rho_hat=rho_hat,
        flops=report.sparse_total,
        dense_flops=float(report.dense_total),
        tokens=valid_tokens,
        routing=routing.kind,
    )


def trace_records(model: ModelParams, routers: RouterParams | None, split: Split,
                  routing: RoutingMode | None = None, batch_size: int = 256, max_batches: int | None = None,
                  sample: int = 4):
    """One record per (batch, layer): activation count, mean similarity, sampled token maps."""
    routing = routing or RoutingMode.inference()
    for b, batch in enumerate(_chunks(split, batch_size)):
        if max_batches is not None and b >= max_batches:
            break
        with T.no_grad():
            _, trace = forward(model, batch.tokens, routing, routers, valid=batch.valid, with_similarity=True)
        mu = trace.mean_similarity()
        counts = trace.activation_counts()
        for i in range(trace.n_layers):
            sim = trace.similarity[i, :sample]
            yield {
                "batch": b,
                "layer": i,
                "sequences": int(batch.tokens.shape[0]),
                "seq_len": int(batch.tokens.shape[1]),
                "tokens": trace.valid_tokens(),
                "activations": int(counts[i]),
                "mean_similarity": None if np.isnan(mu[i]) else float(mu[i]),
                "activation_map": trace.predicted[i, :sample].astype(int).tolist(),
                "similarity_map": np.where(np.isnan(sim), None, np.round(sim, 6)).tolist(),
                "score_map": np.round(trace.scores[i, :sample], 6).tolist(),
            }


def export_trace(path, model: ModelParams, routers: RouterParams | None, split: Split, **kwargs) -> int:
    """Write :func:`trace_records` as JSON lines; returns the record count."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    n = 0
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w") as fh:
            for record in trace_records(model, routers, split, **kwargs):
                fh.write(json.dumps(record) + "\n")
                n += 1
        os.replace(tmp, path)
    except OSError as exc:
        raise OutputError(f"cannot write trace {path}: {exc}") from None
    return n


def check_task_fits(model: ModelParams, data: TaskData) -> None:
    if data.vocab > model.config.vocab:
        raise ConfigError(f"task vocabulary {data.vocab} exceeds the model's {model.config.vocab}")
    if data.seq_len > model.config.max_seq:
        raise ConfigError(f"task sequences of {data.seq_len} exceed the model's max_seq={model.config.max_seq}")
