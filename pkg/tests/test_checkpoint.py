"""Checkpoint round trips and corruption handling."""

import json
import struct

import numpy as np
import pytest

from minilion import checkpoint as ck
from minilion.params import ParamStore
from minilion.tensor import Rng
from minilion.training import AdamState


@pytest.fixture
def store():
    s = ParamStore()
    s.add("a", np.arange(6.0).reshape(2, 3) / 7, "gates")
    s.add("b", [1.5, -2.25], "lm_base")
    s.set_trainable({"gates"})
    return s


def payload(store, **kw):
    rng = Rng(5)
    rng.next_u64()
    return ck.dumps(store, rng, **kw)


class TestRoundTrip:
    def test_bytes(self, store):
        data = payload(store, model_config={"d_model": 8}, provenance={"stage": "s1"})
        back = ck.loads(data)
        assert back.params.snapshot() == store.snapshot()
        assert back.params.trainable_names() == ["a"]
        assert back.params.group_of("b") == "lm_base"
        assert back.model_config == {"d_model": 8}
        assert back.provenance == {"stage": "s1"}
        rng = Rng(5)
        rng.next_u64()
        assert back.rng.state == rng.state
        assert ck.dumps(back.params, back.rng, model_config={"d_model": 8},
                        provenance={"stage": "s1"}) == data

    def test_optimizer(self, store):
        opt = AdamState(3, {"a": np.full((2, 3), 0.5)}, {"a": np.full((2, 3), 0.25)})
        back = ck.loads(payload(store, opt=opt))
        assert back.opt_t == 3
        assert back.opt_m["a"].tobytes() == opt.m["a"].tobytes()
        assert back.opt_v["a"].tobytes() == opt.v["a"].tobytes()

    def test_file(self, store, tmp_path):
        path = tmp_path / "x.ck"
        digest = ck.save(path, store, Rng(0))
        assert digest == ck.file_hash(path)
        info = ck.describe(path)
        assert info["n_tensors"] == 2 and info["n_elements"] == 8
        assert info["groups"] == {"gates": 6, "lm_base": 2}
        assert info["trainable"] == ["gates"]


class TestCorruption:
    def test_truncated_by_one_byte(self, store):
        with pytest.raises(ck.TruncatedPayloadError):
            ck.loads(payload(store)[:-1])

    def test_trailing(self, store):
        with pytest.raises(ck.TrailingDataError):
            ck.loads(payload(store) + b"\x00")

    def test_bad_magic(self, store):
        data = payload(store)
        with pytest.raises(ck.CorruptHeaderError):
            ck.loads(b"X" + data[1:])
        with pytest.raises(ck.CorruptHeaderError):
            ck.loads(b"")

    def _rewrite_header(self, data, edit):
        n = struct.unpack("<Q", data[8:16])[0]
        header = json.loads(data[16:16 + n])
        edit(header)
        head = json.dumps(header).encode()
        return data[:8] + struct.pack("<Q", len(head)) + head + data[16 + n:]

    def test_version(self, store):
        data = self._rewrite_header(payload(store), lambda h: h.update(format_version=99))
        with pytest.raises(ck.VersionMismatchError):
            ck.loads(data)

    def test_header_garbage(self, store):
        data = payload(store)
        n = struct.unpack("<Q", data[8:16])[0]
        with pytest.raises(ck.CorruptHeaderError):
            ck.loads(data[:16] + b"{" * n + data[16 + n:])
        with pytest.raises(ck.CorruptHeaderError):
            ck.loads(data[:8] + struct.pack("<Q", 10**9) + data[16:])

    def test_missing_key(self, store):
        data = self._rewrite_header(payload(store), lambda h: h.pop("rng_state"))
        with pytest.raises(ck.CorruptHeaderError):
            ck.loads(data)

    def test_errors_share_base(self):
        for cls in (ck.CorruptHeaderError, ck.TruncatedPayloadError,
                    ck.VersionMismatchError, ck.TrailingDataError):
            assert issubclass(cls, ck.CheckpointError)
