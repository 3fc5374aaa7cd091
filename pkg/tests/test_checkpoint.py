import json

import numpy as np
import pytest

from noah import checkpoint as C
from noah.tensor import Tensor


def sample_tensors(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "head.w": rng.standard_normal((4, 3)).astype(np.float32),
        "backbone.pos_embed": rng.standard_normal((5, 4)).astype(np.float32),
        "vpt.L0.P": Tensor(rng.standard_normal((2, 4)).astype(np.float32)),
    }


class TestRoundTrip:
    def test_bit_identical_tensors(self, tmp_path):
        tensors = sample_tensors()
        path = tmp_path / "a.ckpt"
        C.save_checkpoint(path, tensors)
        loaded = C.load_checkpoint(path)
        assert set(loaded) == set(tensors)
        for name, t in tensors.items():
            arr = getattr(t, "data", t)
            assert loaded[name].tobytes() == arr.tobytes()
            assert loaded[name].shape == arr.shape

    def test_save_load_save_byte_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        C.save_checkpoint(p1, sample_tensors())
        C.save_checkpoint(p2, C.load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(C.CheckpointError):
            C.save_checkpoint(tmp_path / "e.ckpt", {})


class TestCorruption:
    def write(self, tmp_path):
        path = tmp_path / "c.ckpt"
        C.save_checkpoint(path, sample_tensors())
        return path

    def test_truncated_payload(self, tmp_path):
        path = self.write(tmp_path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(C.CheckpointError) as exc:
            C.load_checkpoint(path)
        assert exc.value.kind == "truncated_payload"

    def test_trailing_garbage(self, tmp_path):
        path = self.write(tmp_path)
        path.write_bytes(path.read_bytes() + b"\x00" * 4)
        with pytest.raises(C.CheckpointError) as exc:
            C.load_checkpoint(path)
        assert exc.value.kind == "corrupt_header"

    def test_bad_magic(self, tmp_path):
        path = self.write(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"HAON"
        path.write_bytes(bytes(raw))
        with pytest.raises(C.CheckpointError) as exc:
            C.load_checkpoint(path)
        assert exc.value.kind == "bad_magic"

    def test_unknown_version(self, tmp_path):
        path = self.write(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = np.array(99, "<u4").tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(C.CheckpointError) as exc:
            C.load_checkpoint(path)
        assert exc.value.kind == "unknown_version"

    def test_corrupt_header_json(self, tmp_path):
        path = self.write(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[16] = ord("X")
        path.write_bytes(bytes(raw))
        with pytest.raises(C.CheckpointError) as exc:
            C.load_checkpoint(path)
        assert exc.value.kind == "corrupt_header"

    def test_overlapping_offsets(self, tmp_path):
        path = tmp_path / "d.ckpt"
        C.save_checkpoint(path, sample_tensors())
        raw = path.read_bytes()
        header_len = int(np.frombuffer(raw[8:16], "<u8")[0])
        header = json.loads(raw[16 : 16 + header_len])
        names = sorted(header["tensors"])
        header["tensors"][names[1]]["offset"] = 0  # collide with the first
        new_header = json.dumps(header, sort_keys=True).encode()
        path.write_bytes(
            raw[:8] + np.array(len(new_header), "<u8").tobytes() + new_header + raw[16 + header_len :]
        )
        with pytest.raises(C.CheckpointError) as exc:
            C.load_checkpoint(path)
        assert exc.value.kind == "corrupt_header"


class TestSecondParser:
    def test_header_agrees_with_independent_parse(self, tmp_path):
        tensors = sample_tensors()
        path = tmp_path / "f.ckpt"
        C.save_checkpoint(path, tensors)

        raw = path.read_bytes()
        assert raw[:4] == b"NOAH"
        assert int(np.frombuffer(raw[4:8], "<u4")[0]) == C.VERSION
        header_len = int(np.frombuffer(raw[8:16], "<u8")[0])
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
        entries = header["tensors"]
        assert len(entries) == len(tensors)
        total = sum(
            int(np.prod(e["shape"])) * 4 for e in entries.values()
        )
        assert len(raw) - 16 - header_len == total
        loaded = C.load_checkpoint(path)
        assert len(loaded) == len(entries)
