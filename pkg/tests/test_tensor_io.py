"""Tensor file format and checkpoint directories."""

import numpy as np
import pytest

from wildsplat.errors import ContractError
from wildsplat.rng import stream
from wildsplat.tensor_io import (
    MAGIC,
    load_checkpoint,
    read_manifest,
    read_tensor,
    save_checkpoint,
    write_manifest,
    write_tensor,
)


def test_tensor_roundtrip_exact(tmp_path):
    r = stream(51, "io-roundtrip")
    for shape in [(3,), (2, 5), (4, 1, 3), (1,)]:
        arr = r.standard_normal(shape).astype(np.float32)
        p = tmp_path / "t.sgsw"
        write_tensor(p, arr)
        back = read_tensor(p)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, arr)


def test_scalar_promoted_to_length_one(tmp_path):
    p = tmp_path / "s.sgsw"
    write_tensor(p, np.float32(2.5))
    back = read_tensor(p)
    assert back.shape == (1,)
    assert back[0] == np.float32(2.5)


def test_file_layout_is_pinned(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    p = tmp_path / "layout.sgsw"
    write_tensor(p, arr)
    blob = p.read_bytes()
    assert blob[:4] == MAGIC
    assert blob[4:8] == bytes([1, 0, 2, 0])  # version 1, rank 2, little endian
    assert np.frombuffer(blob[8:16], dtype="<u4").tolist() == [2, 3]
    np.testing.assert_array_equal(np.frombuffer(blob[16:], dtype="<f4"), arr.ravel())


def test_bad_magic_and_truncation_rejected(tmp_path):
    p = tmp_path / "bad.sgsw"
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ContractError):
        read_tensor(p)
    arr = np.ones((4, 4), np.float32)
    q = tmp_path / "trunc.sgsw"
    write_tensor(q, arr)
    q.write_bytes(q.read_bytes()[:-8])
    with pytest.raises(ContractError):
        read_tensor(q)


def test_unsupported_version_rejected(tmp_path):
    p = tmp_path / "v9.sgsw"
    write_tensor(p, np.ones(2, np.float32))
    blob = bytearray(p.read_bytes())
    blob[4] = 9
    p.write_bytes(bytes(blob))
    with pytest.raises(ContractError):
        read_tensor(p)


def test_manifest_roundtrip_and_comments(tmp_path):
    p = tmp_path / "manifest.txt"
    write_manifest(p, {"kind": "demo", "count": 3})
    text = p.read_text()
    p.write_text("# header comment\n\n" + text)
    m = read_manifest(p)
    assert m == {"kind": "demo", "count": "3"}


def test_checkpoint_roundtrip(tmp_path):
    r = stream(52, "io-ckpt")
    arrays = {
        "weights": r.standard_normal((3, 4)).astype(np.float32),
        "bias": r.standard_normal(4).astype(np.float32),
    }
    save_checkpoint(tmp_path / "ck", arrays, {"kind": "unit-test", "note": "x"})
    back, manifest = load_checkpoint(tmp_path / "ck")
    assert set(back) == {"weights", "bias"}
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    assert manifest["kind"] == "unit-test"
    assert manifest["arrays"] == "bias weights"  # sorted, so listings are stable


def test_checkpoint_bytes_deterministic(tmp_path):
    arrays = {"a": np.ones((2, 2), np.float32)}
    save_checkpoint(tmp_path / "c1", arrays, {"kind": "demo"})
    save_checkpoint(tmp_path / "c2", arrays, {"kind": "demo"})
    for name in ("a.sgsw", "manifest.txt"):
        b1 = (tmp_path / "c1" / name).read_bytes()
        b2 = (tmp_path / "c2" / name).read_bytes()
        assert b1 == b2
