import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from percevox.container import ContainerError, load_container, save_container

settings.register_profile("ci", deadline=None, max_examples=25)
settings.load_profile("ci")


def test_roundtrip_preserves_arrays_and_meta(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "weights": rng.standard_normal((4, 7)).astype(np.float32),
        "bias": rng.standard_normal(7),
        "steps": np.arange(12, dtype=np.int64).reshape(3, 4),
        "empty": np.zeros((0, 5)),
    }
    meta = {"epoch": 3, "lr": 0.002, "tags": ["a", "b"]}
    path = tmp_path / "ckpt.pvcx"
    save_container(path, arrays, meta)
    loaded, loaded_meta = load_container(path)
    assert list(loaded) == list(arrays)
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        np.testing.assert_array_equal(loaded[name], arrays[name])
    assert loaded_meta == meta


def test_save_load_save_is_byte_identical(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {"a": rng.standard_normal((8, 3)), "b": np.float32(rng.standard_normal(5))}
    p1, p2 = tmp_path / "one.pvcx", tmp_path / "two.pvcx"
    save_container(p1, arrays, {"k": 1})
    loaded, meta = load_container(p1)
    save_container(p2, loaded, meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.pvcx"
    path.write_bytes(b"NOPE!" + b"\x00" * 40)
    with pytest.raises(ContainerError, match="magic"):
        load_container(path)


def test_wrong_version_rejected(tmp_path):
    path = tmp_path / "v.pvcx"
    save_container(path, {"x": np.zeros(3)}, {})
    raw = bytearray(path.read_bytes())
    raw[5] = 99  # low byte of the version field
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerError, match="version"):
        load_container(path)


def test_corrupted_payload_fails_crc(tmp_path):
    path = tmp_path / "c.pvcx"
    save_container(path, {"x": np.ones(16)}, {})
    raw = bytearray(path.read_bytes())
    raw[-20] ^= 0xFF  # flip a payload byte
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerError, match="CRC"):
        load_container(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "t.pvcx"
    save_container(path, {"x": np.ones(16)}, {})
    path.write_bytes(path.read_bytes()[:10])
    with pytest.raises(ContainerError):
        load_container(path)


@given(
    st.lists(
        st.tuples(
            st.sampled_from(["f4", "f8", "i4", "i8"]),
            st.lists(st.integers(0, 5), min_size=1, max_size=3),
        ),
        min_size=1,
        max_size=5,
    ),
    st.integers(0, 2**32 - 1),
)
def test_roundtrip_property(specs, seed):
    rng = np.random.default_rng(seed)
    arrays = {}
    for i, (dtype, shape) in enumerate(specs):
        arrays[f"arr{i}"] = (rng.standard_normal(shape) * 100).astype(dtype)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "p.pvcx"
        save_container(path, arrays, {"n": len(arrays)})
        loaded, meta = load_container(path)
    assert meta["n"] == len(arrays)
    for name, arr in arrays.items():
        assert loaded[name].dtype == arr.dtype
        np.testing.assert_array_equal(loaded[name], arr)
