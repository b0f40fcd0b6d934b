"""Single-file checkpoints.

Byte layout (all integers little-endian)::

    0   4  magic  b"DLO1"
    4   4  uint32 format version (currently 1)
    8   8  uint64 header length N
    16  N  UTF-8 JSON header (manifest)
    16+N   payload: raw little-endian tensors, back to back

Each manifest entry gives ``name``, ``shape``, ``dtype`` (numpy type string,
``<f4`` or ``<f8``), ``offset`` (relative to the payload start) and
``length`` in bytes.  Model tensors use the names of
``ModelParams.named_tensors``; routers are ``routers.<i>``; optional
optimiser moments are ``optim.m.<param>`` / ``optim.v.<param>``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    IntegrityError,
    NotACheckpointError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .layers import LAYER_TENSORS, LayerParams, ModelConfig, ModelParams
from .router import RouterParams
from .tensor import Tensor
from .trainer import AdamW, SparsitySchedule

MAGIC = b"DLO1"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    model: ModelParams
    routers: RouterParams | None = None
    schedule: SparsitySchedule | None = None
    optim: AdamW | None = None
    provenance: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def routers_or_zeros(self) -> RouterParams:
        if self.routers is not None:
            return self.routers
        cfg = self.model.config
        return RouterParams.zeros(cfg.n_layers, cfg.d_model)


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save(path, model: ModelParams, routers: RouterParams | None = None, schedule: SparsitySchedule | None = None,
         optim: AdamW | None = None, provenance: dict | None = None) -> None:
    """Write atomically: a ``.tmp`` sibling is renamed over ``path`` once complete."""
    path = Path(path)
    arrays: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in model.named_tensors()]
    if routers is not None:
        if len(routers) != model.config.n_layers:
            raise CheckpointError(f"{len(routers)} routers for a {model.config.n_layers}-layer model")
        arrays += [(f"routers.{i}", w.data) for i, w in enumerate(routers.weights)]
    if optim is not None:
        for name in sorted(optim.m):
            arrays.append((f"optim.m.{name}", optim.m[name]))
            arrays.append((f"optim.v.{name}", optim.v[name]))

    entries, offset = [], 0
    for name, arr in arrays:
        arr = _le(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "length": arr.nbytes})
        offset += arr.nbytes
    header = {
        "format": MAGIC.decode(),
        "version": VERSION,
        "config": model.config.to_dict(),
        "tensors": entries,
        "router": None if routers is None else {"beta": routers.beta, "gamma": routers.gamma},
        "schedule": None if schedule is None else schedule.to_dict(),
        "optim": None if optim is None else optim.hyper(),
        "provenance": provenance or {},
    }
    blob = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
            fh.write(blob)
            for _, arr in arrays:
                fh.write(_le(arr).tobytes())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc


def read_manifest(path) -> tuple[dict, int, int]:
    """Header dict, payload start offset and payload size in bytes."""
    path = Path(path)
    try:
        size = path.stat().st_size
        with open(path, "rb") as fh:
            prefix = fh.read(_PREFIX.size)
            if len(prefix) < _PREFIX.size or prefix[:4] != MAGIC:
                raise NotACheckpointError(f"{path}: not a DLO checkpoint")
            _, version, n = _PREFIX.unpack(prefix)
            if version != VERSION:
                raise VersionMismatchError(f"{path}: checkpoint version {version}, this reader supports {VERSION}")
            raw = fh.read(n)
    except OSError as exc:
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc
    if len(raw) < n:
        raise TruncatedPayloadError(f"{path}: truncated header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable manifest: {exc}") from None
    start = _PREFIX.size + n
    return header, start, size - start


def _read_tensors(path, header: dict, start: int, payload: int) -> dict[str, np.ndarray]:
    entries = sorted(header.get("tensors", []), key=lambda e: e["offset"])
    end = 0
    for e in entries:
        dtype = np.dtype(e["dtype"])
        if dtype.kind != "f":
            raise IntegrityError(f"{e['name']}: unsupported scalar type {e['dtype']}")
        expected = int(np.prod(e["shape"], dtype=np.int64)) * dtype.itemsize
        if expected != e["length"]:
            raise IntegrityError(f"{e['name']}: manifest shape {e['shape']} disagrees with payload length {e['length']}")
        if e["offset"] < end:
            raise IntegrityError(f"{e['name']}: overlapping payload entries")
        end = e["offset"] + e["length"]
    if end > payload:
        raise TruncatedPayloadError(f"{path}: truncated payload ({payload} of {end} bytes present)")
    out = {}
    with open(path, "rb") as fh:
        for e in entries:
            fh.seek(start + e["offset"])
            buf = fh.read(e["length"])
            arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
            out[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return out


def load(path) -> Checkpoint:
    header, start, payload = read_manifest(path)
    if header.get("format") != MAGIC.decode():
        raise NotACheckpointError(f"{path}: not a DLO checkpoint")
    try:
        config = ModelConfig(**header["config"])
    except (KeyError, TypeError) as exc:
        raise IntegrityError(f"{path}: bad model config in manifest: {exc}") from None
    arrays = _read_tensors(path, header, start, payload)

    def take(name, shape) -> Tensor:
        if name not in arrays:
            raise IntegrityError(f"{path}: missing tensor {name}")
        arr = arrays[name]
        if arr.shape != shape:
            raise IntegrityError(f"{path}: {name} has shape {arr.shape}, config implies {shape}")
        return Tensor(arr, requires_grad=True, dtype=arr.dtype)

    d, f = config.d_model, config.d_ff
    shapes = {"attn.wq": (d, d), "attn.wk": (d, d), "attn.wv": (d, d), "attn.w_out": (d, d),
              "mlp.w_gate": (d, f), "mlp.w_up": (d, f), "mlp.w_down": (f, d), "norm1": (d,), "norm2": (d,)}
    layers = []
    for i in range(config.n_layers):
        parts = {n.split(".")[-1]: take(f"layers.{i}.{n}", shapes[n]) for n in LAYER_TENSORS}
        layers.append(LayerParams(**parts))
    model = ModelParams(
        config=config,
        embed=take("embed", (config.vocab, d)),
        pos=take("pos", (config.max_seq, d)),
        layers=layers,
        final_norm=take("final_norm", (d,)),
        head=take("head", (d, config.vocab)),
    )

    routers = None
    if header.get("router") is not None:
        weights = [take(f"routers.{i}", (d, 1)) for i in range(config.n_layers)]
        routers = RouterParams(weights, header["router"]["beta"], header["router"]["gamma"])

    schedule = None
    if header.get("schedule") is not None:
        schedule = SparsitySchedule.from_dict(header["schedule"])

    optim = None
    if header.get("optim") is not None:
        hyper = dict(header["optim"])
        step = hyper.pop("step")
        optim = AdamW(**hyper)
        optim.step = step
        for name, arr in arrays.items():
            if name.startswith("optim.m."):
                optim.m[name[len("optim.m."):]] = arr
            elif name.startswith("optim.v."):
                optim.v[name[len("optim.v."):]] = arr
        if set(optim.m) != set(optim.v):
            raise IntegrityError(f"{path}: optimiser moments are incomplete")

    return Checkpoint(model, routers, schedule, optim, header.get("provenance", {}), header)
