import json
import struct

import numpy as np
import pytest

from dlo import checkpoint
from dlo.errors import (CheckpointError, IntegrityError, NotACheckpointError, TruncatedPayloadError,
                        VersionMismatchError)
from dlo.expansion import ExpansionSpec, expand, expand_routers
from dlo.layers import MODEL_PRESETS, init_model
from dlo.router import RouterParams
from dlo.trainer import AdamW, Batch, SparsitySchedule, train_step


@pytest.fixture
def trained(tmp_path):
    model = init_model(MODEL_PRESETS["tiny"], 0)
    routers = RouterParams.zeros(2, 8)
    schedule = SparsitySchedule.create(2, 0.25, 0.0, 2, 10)
    optim = AdamW(lr=1e-2)
    rng = np.random.default_rng(0)
    batch = Batch(rng.integers(0, 16, (2, 4)), rng.integers(0, 16, (2, 4)), np.ones((2, 4), dtype=bool))
    train_step(model, routers, batch, schedule, optim)
    return model, routers, schedule, optim


def rewrite_header(path, mutate):
    raw = path.read_bytes()
    magic, version, n = struct.unpack("<4sIQ", raw[:16])
    header = json.loads(raw[16:16 + n])
    mutate(header)
    blob = json.dumps(header).encode()
    path.write_bytes(struct.pack("<4sIQ", magic, version, len(blob)) + blob + raw[16 + n:])


class TestRoundTrip:
    def test_bit_exact(self, tmp_path, trained):
        model, routers, schedule, optim = trained
        path = tmp_path / "a.dlo"
        checkpoint.save(path, model, routers, schedule, optim, {"note": "x"})
        ck = checkpoint.load(path)
        for (n1, a), (n2, b) in zip(model.named_tensors(), ck.model.named_tensors()):
            assert n1 == n2 and a.data.dtype == b.data.dtype and np.array_equal(a.data, b.data)
        for a, b in zip(routers.weights, ck.routers.weights):
            assert np.array_equal(a.data, b.data)
        assert ck.schedule == schedule
        assert ck.optim.step == optim.step and ck.optim.hyper() == optim.hyper()
        for name in optim.m:
            assert np.array_equal(optim.m[name], ck.optim.m[name])
            assert np.array_equal(optim.v[name], ck.optim.v[name])
        assert ck.provenance == {"note": "x"}

    def test_double_precision(self, tmp_path, double):
        model = init_model(MODEL_PRESETS["tiny"], 1)
        checkpoint.save(tmp_path / "d.dlo", model)
        ck = checkpoint.load(tmp_path / "d.dlo")
        assert ck.model.head.dtype == np.float64
        assert np.array_equal(ck.model.head.data, model.head.data)

    def test_inference_only(self, tmp_path):
        model = init_model(MODEL_PRESETS["tiny"], 0)
        checkpoint.save(tmp_path / "m.dlo", model)
        ck = checkpoint.load(tmp_path / "m.dlo")
        assert ck.routers is None and ck.optim is None and ck.schedule is None
        zeros = ck.routers_or_zeros()
        assert len(zeros) == 2 and not any(w.data.any() for w in zeros.weights)

    def test_layout(self, tmp_path):
        model = init_model(MODEL_PRESETS["tiny"], 0)
        path = tmp_path / "m.dlo"
        checkpoint.save(path, model, RouterParams.zeros(2, 8))
        raw = path.read_bytes()
        assert raw[:4] == b"DLO1"
        assert struct.unpack("<I", raw[4:8])[0] == 1
        n = struct.unpack("<Q", raw[8:16])[0]
        header = json.loads(raw[16:16 + n])
        entries = sorted(header["tensors"], key=lambda e: e["offset"])
        assert entries[0]["offset"] == 0
        assert all(a["offset"] + a["length"] == b["offset"] for a, b in zip(entries, entries[1:]))
        assert 16 + n + entries[-1]["offset"] + entries[-1]["length"] == len(raw)
        names = [e["name"] for e in entries]
        assert len(names) == len(set(names))
        head = next(e for e in entries if e["name"] == "head")
        start = 16 + n + head["offset"]
        arr = np.frombuffer(raw[start:start + head["length"]], dtype="<f4").reshape(head["shape"])
        assert np.array_equal(arr, model.head.data)

    def test_expanded_toy32_has_forty_router_entries(self, tmp_path):
        model = init_model(MODEL_PRESETS["toy-32"], 0)
        checkpoint.save(tmp_path / "base.dlo", model)
        base = checkpoint.load(tmp_path / "base.dlo")
        spec = ExpansionSpec(groups=4, per_group=2, policy="identity")
        big = expand(base.model, spec)
        routers = expand_routers(base.routers, spec, 32, 16)
        checkpoint.save(tmp_path / "big.dlo", big, routers)
        header, _, _ = checkpoint.read_manifest(tmp_path / "big.dlo")
        assert sum(e["name"].startswith("routers.") for e in header["tensors"]) == 40

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        checkpoint.save(tmp_path / "m.dlo", init_model(MODEL_PRESETS["tiny"], 0))
        assert sorted(p.name for p in tmp_path.iterdir()) == ["m.dlo"]

    def test_failed_write_keeps_old_file(self, tmp_path, monkeypatch):
        path = tmp_path / "m.dlo"
        checkpoint.save(path, init_model(MODEL_PRESETS["tiny"], 0))
        before = path.read_bytes()

        def boom(*_):
            raise OSError("disk full")

        monkeypatch.setattr(checkpoint.os, "replace", boom)
        with pytest.raises(CheckpointError):
            checkpoint.save(path, init_model(MODEL_PRESETS["tiny"], 1))
        assert path.read_bytes() == before


class TestCorruption:
    @pytest.fixture
    def path(self, tmp_path):
        p = tmp_path / "m.dlo"
        checkpoint.save(p, init_model(MODEL_PRESETS["tiny"], 0), RouterParams.zeros(2, 8))
        return p

    def test_wrong_magic(self, path):
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(NotACheckpointError, match="not a DLO checkpoint"):
            checkpoint.load(path)

    def test_not_a_file_format_at_all(self, tmp_path):
        p = tmp_path / "x.dlo"
        p.write_bytes(b"hi")
        with pytest.raises(NotACheckpointError):
            checkpoint.load(p)

    def test_version_mismatch(self, path):
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            checkpoint.load(path)

    def test_truncated(self, path):
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(TruncatedPayloadError, match="truncated payload"):
            checkpoint.load(path)

    def test_length_disagrees_with_shape(self, path):
        rewrite_header(path, lambda h: h["tensors"][0].update(shape=[3, 3]))
        with pytest.raises(IntegrityError):
            checkpoint.load(path)

    def test_overlap(self, path):
        def mutate(h):
            h["tensors"][1]["offset"] = h["tensors"][0]["offset"]

        rewrite_header(path, mutate)
        with pytest.raises(IntegrityError):
            checkpoint.load(path)

    def test_config_mismatch(self, path):
        rewrite_header(path, lambda h: h["config"].update(d_model=16, n_heads=2))
        with pytest.raises(IntegrityError):
            checkpoint.load(path)

    def test_missing_tensor(self, path):
        rewrite_header(path, lambda h: h.update(tensors=[e for e in h["tensors"] if e["name"] != "head"]))
        with pytest.raises(IntegrityError, match="missing tensor head"):
            checkpoint.load(path)

    def test_router_count_checked_on_save(self, tmp_path):
        with pytest.raises(CheckpointError):
            checkpoint.save(tmp_path / "m.dlo", init_model(MODEL_PRESETS["tiny"], 0), RouterParams.zeros(3, 8))
