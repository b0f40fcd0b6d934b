"""Deterministic toy tasks: modular addition, sequence copy, character LM.

Every task yields fixed-length ``(tokens, targets, loss_mask)`` arrays where
``targets[s]`` is the token following ``tokens[s]``.  Train and eval splits
are disjoint by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .trainer import Batch

KINDS = ("modular-addition", "sequence-copy", "char-lm")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "modular-addition"
    vocab: int | None = None
    seq_len: int | None = None
    seed: int = 0
    n_train: int | None = None
    n_eval: int | None = None
    modulus: int = 97

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        for name in ("vocab", "seq_len", "n_train", "n_eval"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"TaskSpec.{name} must be positive, got {value}")
        if self.modulus < 2:
            raise ConfigError("modulus must be at least 2")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("kind", "vocab", "seq_len", "seed", "n_train", "n_eval", "modulus")}

    @classmethod
    def parse(cls, text: str) -> "TaskSpec":
        """``kind[:key=value,...]``, e.g. ``modular-addition:modulus=7,n_eval=10``."""
        kind, _, rest = text.partition(":")
        kwargs = {}
        for item in filter(None, rest.split(",")):
            key, eq, value = item.partition("=")
            if not eq or key not in ("vocab", "seq_len", "seed", "n_train", "n_eval", "modulus"):
                raise ConfigError(f"bad task option {item!r}")
            try:
                kwargs[key] = int(value)
            except ValueError:
                raise ConfigError(f"task option {key} needs an integer, got {value!r}") from None
        return cls(kind=kind, **kwargs)


@dataclass
class Split:
    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray

    def __len__(self):
        return len(self.tokens)

    def batch(self, idx=slice(None)) -> Batch:
        return Batch(self.tokens[idx], self.targets[idx], self.loss_mask[idx])


@dataclass
class TaskData:
    spec: TaskSpec
    vocab: int
    seq_len: int
    train: Split
    eval: Split
    symbols: list[str] = field(default_factory=list)

    def decode(self, ids) -> list[str]:
        return [self.symbols[i] for i in ids]

    def encode(self, words) -> np.ndarray:
        lookup = {s: i for i, s in enumerate(self.symbols)}
        return np.array([lookup[w] for w in words], dtype=np.int64)


def _from_streams(streams: np.ndarray, loss_from: int) -> Split:
    tokens = streams[:, :-1].astype(np.int64)
    targets = streams[:, 1:].astype(np.int64)
    mask = np.zeros(tokens.shape, dtype=bool)
    mask[:, loss_from:] = True
    return Split(tokens, targets, mask)


def _modular_addition(spec: TaskSpec) -> TaskData:
    m = spec.modulus
    vocab = spec.vocab or m + 2
    if vocab < m + 2:
        raise ConfigError(f"modular addition mod {m} needs vocab >= {m + 2}, got {vocab}")
    if spec.seq_len not in (None, 4):
        raise ConfigError("modular addition sequences have length 4 ('a + b =')")
    plus, eq = m, m + 1
    pairs = np.array([(a, b) for a in range(m) for b in range(m)], dtype=np.int64)
    pairs = pairs[np.random.default_rng(spec.seed).permutation(len(pairs))]
    n_eval = spec.n_eval if spec.n_eval is not None else max(1, len(pairs) // 10)
    n_train = spec.n_train if spec.n_train is not None else len(pairs) - n_eval
    if n_eval + n_train > len(pairs):
        raise ConfigError(f"only {len(pairs)} distinct problems mod {m}; asked for {n_train} + {n_eval}")
    a, b = pairs[:, 0], pairs[:, 1]
    streams = np.stack([a, np.full_like(a, plus), b, np.full_like(a, eq), (a + b) % m], axis=1)
    symbols = [str(i) for i in range(m)] + ["+", "="] + [f"<unused{i}>" for i in range(vocab - m - 2)]
    return TaskData(
        spec, vocab, 4,
        train=_from_streams(streams[n_eval:n_eval + n_train], 3),
        eval=_from_streams(streams[:n_eval], 3),
        symbols=symbols,
    )


def _sequence_copy(spec: TaskSpec) -> TaskData:
    vocab = spec.vocab or 12
    seq_len = spec.seq_len or 8
    if vocab < 3:
        raise ConfigError("sequence copy needs vocab >= 3 (two symbols and a separator)")
    if seq_len % 2:
        raise ConfigError("sequence copy needs an even seq_len")
    n = seq_len // 2
    sep = vocab - 1
    n_train = spec.n_train or 2048
    n_eval = spec.n_eval or 256
    total = n_train + n_eval
    if (vocab - 1) ** n < total:
        raise ConfigError(f"only {(vocab - 1) ** n} distinct copy sequences; asked for {total}")
    rng = np.random.default_rng(spec.seed)
    seen: dict[tuple, None] = {}
    while len(seen) < total:
        for row in rng.integers(0, vocab - 1, size=(total, n)):
            seen.setdefault(tuple(row), None)
            if len(seen) == total:
                break
    body = np.array(list(seen), dtype=np.int64)
    streams = np.concatenate([body, np.full((total, 1), sep), body], axis=1)
    symbols = [f"s{i}" for i in range(vocab - 1)] + ["|"]
    return TaskData(
        spec, vocab, seq_len,
        train=_from_streams(streams[n_eval:], n),
        eval=_from_streams(streams[:n_eval], n),
        symbols=symbols,
    )


def bundled_text() -> str:
    return resources.files("dlo").joinpath("data/alice.txt").read_text(encoding="utf-8")


def _char_lm(spec: TaskSpec) -> TaskData:
    text = bundled_text()
    symbols = sorted(set(text))
    vocab = spec.vocab or len(symbols)
    if vocab < len(symbols):
        raise ConfigError(f"bundled text has {len(symbols)} distinct characters; vocab={vocab} is too small")
    symbols += [f"<unused{i}>" for i in range(vocab - len(symbols))]
    lookup = {c: i for i, c in enumerate(symbols)}
    ids = np.array([lookup[c] for c in text], dtype=np.int64)
    seq_len = spec.seq_len or 32
    n_windows = (len(ids) - 1) // seq_len
    windows = np.stack([ids[i * seq_len:(i + 1) * seq_len + 1] for i in range(n_windows)])
    n_eval_default = max(1, n_windows // 10)
    cut = n_windows - (spec.n_eval or n_eval_default)
    if cut < 1:
        raise ConfigError("bundled text is too short for the requested eval split")
    train, held = windows[:cut], windows[cut:]
    if spec.n_train is not None:
        train = train[:spec.n_train]
    return TaskData(spec, vocab, seq_len, train=_from_streams(train, 0), eval=_from_streams(held, 0),
                    symbols=symbols)


def generate(spec: TaskSpec) -> TaskData:
    """Build both splits for ``spec``; a pure function of ``spec`` and its seed."""
    if spec.kind == "modular-addition":
        return _modular_addition(spec)
    if spec.kind == "sequence-copy":
        return _sequence_copy(spec)
    return _char_lm(spec)


def iter_batches(split: Split, batch_size: int, seed: int) -> Iterator[Batch]:
    """Endless epoch-shuffled batches; the order depends only on ``seed``."""
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    rng = np.random.default_rng(seed)
    n = len(split)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield split.batch(order[start:start + batch_size])
