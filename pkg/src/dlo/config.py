"""Run configuration: a versioned JSON document validated before any compute.

Example::

    {
      "schema_version": 1,
      "seed": 0,
      "model": {"preset": "modadd"},
      "pretrain": {"steps": 2000, "lr": 0.002, "weight_decay": 0.1},
      "expansion": {"groups": 2, "per_group": 1, "policy": "identity"},
      "task": {"kind": "modular-addition", "modulus": 97},
      "sparsity": {"rho": 0.25, "anneal_ratio": 0.1},
      "optimizer": {"lr": 0.002, "weight_decay": 0.1},
      "batch_size": 256,
      "steps": 2500,
      "output_dir": "runs/modadd"
    }
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .checkpoint import read_manifest
from .errors import ConfigError
from .expansion import ExpansionSpec
from .layers import MODEL_PRESETS, ModelConfig
from .router import DEFAULT_BETA, DEFAULT_GAMMA, RouterParams
from .tasks import TaskSpec, generate
from .trainer import SparsitySchedule

SCHEMA_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Section):
    preset: str | None = None
    d_model: int | None = None
    n_heads: int | None = None
    d_ff: int | None = None
    n_layers: int | None = None
    vocab: int | None = None
    max_seq: int | None = None

    def build(self) -> ModelConfig:
        fields = {k: v for k, v in self.model_dump().items() if k != "preset" and v is not None}
        if self.preset is not None:
            if self.preset not in MODEL_PRESETS:
                raise ConfigError(f"unknown model preset {self.preset!r}; known: {sorted(MODEL_PRESETS)}")
            return MODEL_PRESETS[self.preset].replace(**fields)
        missing = {"d_model", "n_heads", "d_ff", "n_layers", "vocab", "max_seq"} - set(fields)
        if missing:
            raise ConfigError(f"model section needs a preset or all of: {sorted(missing)}")
        return ModelConfig(**fields)


class PretrainSection(_Section):
    """Optional dense training of the base model before expansion."""

    steps: int = Field(0, ge=0)
    lr: float = Field(2e-3, ge=0)
    weight_decay: float = Field(0.1, ge=0)
    batch_size: int | None = Field(None, ge=1)


class ExpansionSection(_Section):
    groups: int = Field(ge=1)
    per_group: int = Field(ge=0)
    policy: str = "identity"
    tau: int = Field(2, ge=1)
    alphas: list[float] | None = None
    alpha: float = 0.5
    seed: int = 0

    def build(self) -> ExpansionSpec:
        alphas = None if self.alphas is None else tuple(self.alphas)
        return ExpansionSpec(self.groups, self.per_group, self.policy, self.tau, alphas, self.alpha, self.seed)


class TaskSection(_Section):
    kind: str = "modular-addition"
    vocab: int | None = None
    seq_len: int | None = None
    seed: int | None = None
    n_train: int | None = None
    n_eval: int | None = None
    modulus: int = 97

    def build(self, default_seed: int) -> TaskSpec:
        seed = default_seed if self.seed is None else self.seed
        return TaskSpec(self.kind, self.vocab, self.seq_len, seed, self.n_train, self.n_eval, self.modulus)


class SparsitySection(_Section):
    rho: float = Field(0.25, ge=0, lt=1)
    rho_start: float = Field(0.0, ge=0, lt=1)
    anneal_steps: int | None = Field(None, ge=0)
    anneal_ratio: float | None = Field(None, ge=0, le=1)

    @model_validator(mode="after")
    def _one_anneal(self):
        if self.anneal_steps is not None and self.anneal_ratio is not None:
            raise ValueError("give anneal_steps or anneal_ratio, not both")
        return self

    def steps_for(self, total: int) -> int:
        if self.anneal_steps is not None:
            return self.anneal_steps
        if self.anneal_ratio is not None:
            return math.ceil(self.anneal_ratio * total)
        return 0


class OptimizerSection(_Section):
    lr: float = Field(2e-5, ge=0)
    warmup_ratio: float = Field(0.03, ge=0, le=1)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.01, ge=0)


class RouterSection(_Section):
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA


class RunConfig(_Section):
    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = 0
    precision: Literal["single", "double"] = "single"
    model: ModelSection = ModelSection(preset="modadd")
    init_checkpoint: str | None = None
    pretrain: PretrainSection = PretrainSection()
    expansion: ExpansionSection | None = None
    task: TaskSection = TaskSection()
    sparsity: SparsitySection = SparsitySection()
    optimizer: OptimizerSection = OptimizerSection()
    router: RouterSection = RouterSection()
    batch_size: int = Field(32, ge=1)
    steps: int = Field(100, ge=1)
    eval_every: int = Field(0, ge=0)
    checkpoint_every: int = Field(0, ge=0)
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        try:
            config = cls.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(_format_errors(exc)) from None
        config.check()
        return config

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    # Everything that would otherwise fail mid-run is checked here.
    def check(self) -> None:
        task = self.task_spec()
        expansion = self.expansion_spec()
        if self.init_checkpoint is None:
            base = self.model.build()
        else:
            if not Path(self.init_checkpoint).is_file():
                raise ConfigError(f"init_checkpoint {self.init_checkpoint} does not exist")
            header, _, _ = read_manifest(self.init_checkpoint)
            base = ModelConfig(**header["config"])
        final_layers = base.n_layers if expansion is None else expansion.expanded_layers(base.n_layers)
        data = generate(task)
        if data.vocab > base.vocab:
            raise ConfigError(f"task needs a vocabulary of {data.vocab}, model has {base.vocab}")
        if data.seq_len > base.max_seq:
            raise ConfigError(f"task sequences of {data.seq_len} exceed the model's max_seq={base.max_seq}")
        if len(data.train) == 0 or len(data.eval) == 0:
            raise ConfigError("task produced an empty split")
        RouterParams.zeros(0, base.d_model, self.router.beta, self.router.gamma)
        SparsitySchedule.create(final_layers, self.sparsity.rho, self.sparsity.rho_start, self.anneal_steps(), self.steps)

    def base_model_config(self) -> ModelConfig:
        return self.model.build()

    def task_spec(self) -> TaskSpec:
        return self.task.build(self.seed)

    def expansion_spec(self) -> ExpansionSpec | None:
        return None if self.expansion is None else self.expansion.build()

    def anneal_steps(self) -> int:
        return self.sparsity.steps_for(self.steps)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "config"
        lines.append(f"{where}: {err['msg']}")
    return "invalid config: " + "; ".join(lines)
