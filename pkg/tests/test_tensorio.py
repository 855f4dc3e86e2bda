"""Round-trip and corruption tests for the named-tensor file format."""

import struct

import numpy as np
import pytest

from fdlab import tensorio


def test_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "scalar": np.asarray(3.5),
        "vec": rng.standard_normal(7),
        "image": rng.standard_normal((4, 5)),
        "batch": rng.standard_normal((2, 3, 4, 5)),
    }
    path = tmp_path / "t.tensors"
    tensorio.write_tensors(path, tensors)
    back = tensorio.read_tensors(path)
    assert list(back) == list(tensors)
    for name in tensors:
        assert back[name].dtype == np.float64
        assert np.array_equal(back[name], np.asarray(tensors[name], dtype=np.float64))


def test_round_trip_preserves_insertion_order(tmp_path):
    names = [f"k{i}" for i in (5, 1, 9, 2)]
    path = tmp_path / "t.tensors"
    tensorio.write_tensors(path, {n: np.zeros(2) for n in names})
    assert list(tensorio.read_tensors(path)) == names


def test_non_float64_input_is_converted(tmp_path):
    path = tmp_path / "t.tensors"
    tensorio.write_tensors(path, {"x": np.arange(4, dtype=np.int32)})
    back = tensorio.read_tensors(path)["x"]
    assert back.dtype == np.float64
    assert np.array_equal(back, [0.0, 1.0, 2.0, 3.0])


def test_bad_magic(tmp_path):
    path = tmp_path / "t.tensors"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(tensorio.TensorFileError, match="magic"):
        tensorio.read_tensors(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "t.tensors"
    path.write_bytes(tensorio.MAGIC + struct.pack("<II", 99, 0))
    with pytest.raises(tensorio.VersionMismatchError, match="99"):
        tensorio.read_tensors(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.tensors"
    tensorio.write_tensors(path, {"x": np.zeros(10)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-9])
    with pytest.raises(tensorio.TensorFileError, match="truncated"):
        tensorio.read_tensors(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.tensors"
    tensorio.write_tensors(path, {"x": np.zeros(3)})
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(tensorio.TensorFileError, match="trailing"):
        tensorio.read_tensors(path)


def test_checksum_tracks_content(tmp_path):
    a = tmp_path / "a.tensors"
    b = tmp_path / "b.tensors"
    tensorio.write_tensors(a, {"x": np.ones(4)})
    tensorio.write_tensors(b, {"x": np.ones(4)})
    assert tensorio.file_checksum(a) == tensorio.file_checksum(b)
    tensorio.write_tensors(b, {"x": 2 * np.ones(4)})
    assert tensorio.file_checksum(a) != tensorio.file_checksum(b)
