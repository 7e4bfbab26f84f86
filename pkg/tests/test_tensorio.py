"""Golden tensor format and checkpoint container."""

import io

import numpy as np
import pytest

from ssmdet.tensorio import (
    TensorFormatError,
    load_checkpoint,
    load_tensor,
    read_tensor,
    save_checkpoint,
    save_tensor,
    tensor_bytes,
)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_roundtrip_bit_exact(tmp_path, dtype):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((3, 4, 5)).astype(dtype)
    path = tmp_path / "t.tnsr"
    save_tensor(path, arr)
    back = load_tensor(path)
    assert back.dtype == dtype
    assert np.array_equal(back, arr)


def test_header_layout():
    blob = tensor_bytes(np.zeros((2, 3), dtype=np.float32))
    assert blob[:4] == b"TNSR"
    assert int.from_bytes(blob[4:8], "little") == 1      # version
    assert blob[8] == 0                                  # f32 code
    assert int.from_bytes(blob[9:13], "little") == 2     # rank
    assert int.from_bytes(blob[13:17], "little") == 2    # first extent
    assert int.from_bytes(blob[17:21], "little") == 3
    assert len(blob) == 21 + 6 * 4


def test_payload_is_little_endian_row_major():
    arr = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float64)
    blob = tensor_bytes(arr)
    payload = np.frombuffer(blob[-32:], dtype="<f8")
    assert np.array_equal(payload, [1.0, 2.0, 3.0, 4.0])


def test_bad_magic_rejected():
    with pytest.raises(TensorFormatError, match="magic"):
        read_tensor(io.BytesIO(b"NOPE" + b"\x00" * 20))


def test_truncated_payload_rejected():
    blob = tensor_bytes(np.ones(4, dtype=np.float32))
    with pytest.raises(TensorFormatError, match="truncated"):
        read_tensor(io.BytesIO(blob[:-2]))


def test_unsupported_dtype_rejected():
    with pytest.raises(TensorFormatError):
        tensor_bytes(np.zeros(3, dtype=np.int32))


def test_checkpoint_roundtrip_with_meta(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {
        "backbone.stage2.weight": rng.standard_normal((4, 2, 3, 3)).astype(np.float32),
        "head.bias": rng.standard_normal(7),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, tensors, meta={"scale": "n", "note": "unit test"})
    meta, back = load_checkpoint(path)
    assert meta["scale"] == "n"
    assert meta["note"] == "unit test"
    assert set(back) == set(tensors)
    for name, arr in tensors.items():
        assert np.array_equal(back[name], arr)
        assert back[name].dtype == arr.dtype


def test_checkpoint_missing_terminator_rejected(tmp_path):
    path = tmp_path / "broken.ckpt"
    path.write_bytes(b"CKPT 1\ntensor x 0 10\n")
    with pytest.raises(TensorFormatError, match="terminator"):
        load_checkpoint(path)
