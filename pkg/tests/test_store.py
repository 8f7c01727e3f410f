"""Binary tensor format and the preprocessed clip store."""

import io
import json
import logging
import struct
import subprocess

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import write_take
from ssmgesture.serialize import (FormatError, load_table, load_tensor, read_tensor, save_table,
                                  save_tensor, tensor_bytes, write_tensor)
from ssmgesture.store import ClipStore, InputError, build_store, git_blob_hash


class TestTensorFormat:
    def test_header_layout(self):
        raw = tensor_bytes(np.arange(6, dtype=np.float64).reshape(2, 3))
        assert raw[:4] == b"DIMT"
        assert struct.unpack("<II", raw[4:12]) == (1, 2)
        assert struct.unpack("<2I", raw[12:20]) == (2, 3)
        assert raw[20] == 0
        np.testing.assert_array_equal(np.frombuffer(raw[21:], "<f8"), np.arange(6))

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(st.sampled_from([np.float64, np.float32]),
                      hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                      elements=st.floats(-1e6, 1e6, width=32)))
    def test_round_trip(self, arr):
        buf = io.BytesIO()
        write_tensor(buf, arr)
        buf.seek(0)
        back = read_tensor(buf)
        assert back.dtype == arr.dtype and back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()

    def test_file_round_trip(self, tmp_path, rng):
        x = rng.standard_normal((4, 7))
        save_tensor(tmp_path / "x.dimt", x)
        assert load_tensor(tmp_path / "x.dimt").tobytes() == x.tobytes()

    @pytest.mark.parametrize("mutate,match", [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
        (lambda b: b[:20] + bytes([7]) + b[21:], "dtype"),
    ])
    def test_malformed(self, mutate, match):
        raw = mutate(tensor_bytes(np.ones((2, 3))))
        with pytest.raises(FormatError, match=match):
            read_tensor(io.BytesIO(raw))

    def test_table_round_trip(self, tmp_path, rng):
        table = {"stack.blocks.0.weight": rng.standard_normal((3, 2)), "b": np.zeros(4),
                 "scalar": np.array(2.5)}
        save_table(tmp_path / "p.dimp", table)
        back = load_table(tmp_path / "p.dimp")
        assert list(back) == list(table)
        for k in table:
            assert back[k].tobytes() == table[k].tobytes()

    def test_table_bad_magic(self, tmp_path):
        (tmp_path / "p.dimp").write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(FormatError):
            load_table(tmp_path / "p.dimp")


class TestBlobHash:
    def test_matches_git(self):
        data = b"hello\n"
        assert git_blob_hash(data) == "ce013625030ba8dba906f756967f9e9ca394464a"

    def test_matches_git_binary(self, tmp_path, rng):
        data = tensor_bytes(rng.standard_normal(10))
        (tmp_path / "blob").write_bytes(data)
        try:
            out = subprocess.run(["git", "hash-object", str(tmp_path / "blob")],
                                 capture_output=True, text=True, check=True).stdout.strip()
        except (OSError, subprocess.CalledProcessError):
            pytest.skip("git not available")
        assert git_blob_hash(data) == out


@pytest.fixture
def raw_dirs(tmp_path):
    bvh, wav = tmp_path / "bvh", tmp_path / "wav"
    bvh.mkdir()
    wav.mkdir()
    return bvh, wav


class TestBuildStore:
    def test_sixty_one_seconds_gives_three_pairs(self, raw_dirs, tmp_path):
        write_take(*raw_dirs, "take", 61)
        man = build_store(*raw_dirs, tmp_path / "out")
        assert len(man["clips"]) == 3
        store = ClipStore.load(tmp_path / "out")
        for p in store.pairs:
            assert p.gesture.shape == (400, 3 * 2 + 6)
            assert p.audio.shape == (320_000,)
        assert [c["offset_s"] for c in man["clips"]] == [0, 20, 40]
        assert len(man["channel_layout"]) == store.n_channels

    def test_idempotent(self, raw_dirs, tmp_path):
        write_take(*raw_dirs, "take", 21)
        a = build_store(*raw_dirs, tmp_path / "a")
        b = build_store(*raw_dirs, tmp_path / "b")
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
        assert a["clips"][0]["gesture_hash"] == b["clips"][0]["gesture_hash"]

    def test_unpaired_skipped_with_warning(self, raw_dirs, tmp_path, caplog):
        write_take(*raw_dirs, "take", 21)
        write_take(*raw_dirs, "orphan", 21)
        (raw_dirs[1] / "orphan.wav").unlink()
        with caplog.at_level(logging.WARNING):
            man = build_store(*raw_dirs, tmp_path / "out")
        assert "orphan.bvh" in caplog.text
        assert man["skipped"] == ["orphan.bvh"]
        assert [c["bvh"] for c in man["clips"]] == ["take.bvh"]

    def test_empty_input(self, raw_dirs, tmp_path):
        with pytest.raises(InputError, match="no paired"):
            build_store(*raw_dirs, tmp_path / "out")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(InputError):
            build_store(tmp_path / "nope", tmp_path, tmp_path / "out")

    def test_too_short(self, raw_dirs, tmp_path):
        write_take(*raw_dirs, "take", 12)
        with pytest.raises(InputError, match="shorter"):
            build_store(*raw_dirs, tmp_path / "out")

    def test_malformed_bvh_names_file(self, raw_dirs, tmp_path):
        write_take(*raw_dirs, "take", 21)
        (raw_dirs[0] / "take.bvh").write_text("HIERARCHY\n")
        with pytest.raises(InputError, match="take.bvh"):
            build_store(*raw_dirs, tmp_path / "out")

    def test_load_rejects_non_store(self, tmp_path):
        with pytest.raises(InputError):
            ClipStore.load(tmp_path)

    def test_normalization_stats(self, raw_dirs, tmp_path):
        write_take(*raw_dirs, "take", 41)
        build_store(*raw_dirs, tmp_path / "out")
        store = ClipStore.load(tmp_path / "out")
        z = np.concatenate([store.normalizer.normalize(p.gesture) for p in store.pairs])
        np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-9)
