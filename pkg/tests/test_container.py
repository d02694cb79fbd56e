import numpy as np
import pytest

from stpoi import container


def test_round_trip(tmp_path):
    path = tmp_path / "x.bin"
    meta = {"kind": "test", "tags": ["a", "b"], "n": 3}
    arrays = {
        "f64": np.linspace(0, 1, 7),
        "f32": np.ones((2, 3), dtype=np.float32),
        "ids": np.arange(5, dtype=np.int64),
        "empty": np.zeros((0, 4)),
    }
    container.save(path, meta, arrays)
    meta2, arrays2 = container.load(path)
    assert meta2 == meta
    assert set(arrays2) == set(arrays)
    for k in arrays:
        assert arrays2[k].dtype == arrays[k].dtype
        assert arrays2[k].shape == arrays[k].shape
        np.testing.assert_array_equal(arrays2[k], arrays[k])


def test_byte_determinism(tmp_path):
    meta = {"b": 1, "a": 2}
    arrays = {"z": np.arange(3.0), "a": np.eye(2)}
    p1, p2 = tmp_path / "1.bin", tmp_path / "2.bin"
    container.save(p1, meta, arrays)
    container.save(p2, {"a": 2, "b": 1}, {"a": np.eye(2), "z": np.arange(3.0)})
    assert p1.read_bytes() == p2.read_bytes()


def test_non_contiguous_and_scalar_ok(tmp_path):
    path = tmp_path / "x.bin"
    arr = np.arange(12.0).reshape(3, 4)[:, ::2]      # non-contiguous view
    container.save(path, {}, {"v": arr, "s": np.float64(2.5)})
    _, arrays = container.load(path)
    np.testing.assert_array_equal(arrays["v"], arr)
    assert arrays["s"].shape == () and arrays["s"] == 2.5


def test_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(TypeError):
        container.save(tmp_path / "x.bin", {}, {"c": np.zeros(2, dtype=complex)})


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(container.ContainerError):
        container.load(path)


def test_rejects_truncation(tmp_path):
    path = tmp_path / "x.bin"
    container.save(path, {"kind": "t"}, {"a": np.ones(100)})
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 40])
    with pytest.raises(container.ContainerError):
        container.load(path)
