"""Binary checkpoint format: round trips and named failures on damaged files."""

import json
import struct

import numpy as np
import pytest

from vldistill.checkpoint import (
    MAGIC,
    Checkpoint,
    CorruptHeaderError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    dumps,
    load_checkpoint,
    loads,
    save_checkpoint,
)


@pytest.fixture
def ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint(
        params={"emb.word": rng.normal(size=(5, 3)).astype(np.float32),
                "pool.b": np.zeros(3, np.float32),
                "scalar": np.float32(2.5) * np.ones((), np.float32)},
        config={"role": "student", "model": {"hidden_dim": 3}, "note": "naïve"},
        rng_state={"seed": 4},
        step=17,
    )


class TestRoundTrip:
    def test_save_load_save_bytes(self, ckpt, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(ckpt, p1)
        back = load_checkpoint(p1)
        save_checkpoint(back, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert all(np.array_equal(back.params[k], ckpt.params[k]) for k in ckpt.params)
        assert back.config == ckpt.config and back.step == 17 and back.rng_state == {"seed": 4}
        assert list(back.params) == list(ckpt.params)

    def test_layout(self, ckpt):
        buf = dumps(ckpt)
        assert buf[:4] == MAGIC
        version, hlen = struct.unpack("<BI", buf[4:9])
        header = json.loads(buf[9:9 + hlen])
        assert version == 1
        assert [t["name"] for t in header["tensors"]] == ["emb.word", "pool.b", "scalar"]
        payload = buf[9 + hlen:]
        assert len(payload) == (15 + 3 + 1) * 4
        np.testing.assert_array_equal(np.frombuffer(payload[:60], "<f4").reshape(5, 3),
                                      ckpt.params["emb.word"])

    def test_float64_is_stored_as_float32(self, ckpt):
        ckpt.params["emb.word"] = ckpt.params["emb.word"].astype(np.float64)
        assert loads(dumps(ckpt)).params["emb.word"].dtype == np.float32

    def test_empty(self):
        back = loads(dumps(Checkpoint({})))
        assert back.params == {} and back.step == 0


class TestCorruption:
    def test_bad_magic(self, ckpt):
        with pytest.raises(CorruptHeaderError, match="magic"):
            loads(b"XXXX" + dumps(ckpt)[4:])

    def test_short_file(self):
        with pytest.raises(CorruptHeaderError):
            loads(b"DV")

    def test_unknown_version(self, ckpt):
        buf = bytearray(dumps(ckpt))
        buf[4] = 9
        with pytest.raises(UnsupportedVersionError, match="9"):
            loads(bytes(buf))

    def test_header_length_past_end(self, ckpt):
        buf = bytearray(dumps(ckpt))
        buf[5:9] = struct.pack("<I", 10**6)
        with pytest.raises(CorruptHeaderError):
            loads(bytes(buf))

    def test_garbled_header(self, ckpt):
        buf = bytearray(dumps(ckpt))
        buf[9] = ord("!")
        with pytest.raises(CorruptHeaderError, match="header"):
            loads(bytes(buf))

    def test_truncated_payload_names_tensor(self, ckpt):
        buf = dumps(ckpt)
        with pytest.raises(TruncatedPayloadError, match="scalar") as err:
            loads(buf[:-2])
        assert err.value.tensor == "scalar"

    def test_trailing_bytes(self, ckpt):
        with pytest.raises(CorruptHeaderError, match="trailing"):
            loads(dumps(ckpt) + b"\0\0\0\0")

    def test_shape_size_disagreement(self, ckpt):
        buf = dumps(ckpt)
        hlen = struct.unpack("<I", buf[5:9])[0]
        header = json.loads(buf[9:9 + hlen])
        header["tensors"][0]["shape"] = [4, 3]
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        with pytest.raises(CorruptHeaderError, match="shape"):
            loads(MAGIC + struct.pack("<BI", 1, len(hb)) + hb + buf[9 + hlen:])
