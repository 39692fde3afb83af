"""Raw tensor file format and record containers."""

import numpy as np
import pytest

from iaunet.errors import FormatError
from iaunet import tensorio


def test_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((3, 4, 5)).astype(np.float32)
    path = tmp_path / "t.iaut"
    tensorio.write_tensor(path, arr)
    back = tensorio.read_tensor(path)
    assert back.dtype == np.float32
    assert arr.tobytes() == back.tobytes()


def test_header_layout():
    arr = np.zeros((2, 3), dtype=np.float32)
    raw = tensorio.tensor_bytes(arr)
    assert raw[:4] == b"IAUT"
    assert raw[4] == 0x01          # version
    assert raw[5] == 0x00          # float32 little-endian
    assert raw[6] == 2             # rank
    dims = np.frombuffer(raw[7:15], dtype="<u4")
    assert tuple(dims) == (2, 3)
    assert len(raw) == 15 + 4 * 6


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.iaut"
    good = tensorio.tensor_bytes(np.ones(2, dtype=np.float32))
    path.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(FormatError, match="magic"):
        tensorio.read_tensor(path)


def test_truncation_rejected(tmp_path):
    path = tmp_path / "cut.iaut"
    good = tensorio.tensor_bytes(np.ones(8, dtype=np.float32))
    path.write_bytes(good[:-5])
    with pytest.raises(FormatError, match="truncated"):
        tensorio.read_tensor(path)


def test_unknown_version_rejected(tmp_path):
    path = tmp_path / "v9.iaut"
    good = bytearray(tensorio.tensor_bytes(np.ones(2, dtype=np.float32)))
    good[4] = 0x09
    path.write_bytes(bytes(good))
    with pytest.raises(FormatError, match="version"):
        tensorio.read_tensor(path)


def test_records_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    records = {
        "stage.0.w": rng.standard_normal((3, 3, 2, 4)).astype(np.float32),
        "head.bias": rng.standard_normal(7).astype(np.float32),
    }
    path = tmp_path / "ckpt.iaut"
    tensorio.write_records(path, records)
    back = tensorio.read_records(path)
    assert set(back) == set(records)
    for k in records:
        assert records[k].tobytes() == back[k].tobytes()
        assert records[k].shape == back[k].shape


def test_record_corruption_is_atomic(tmp_path):
    path = tmp_path / "ckpt.iaut"
    tensorio.write_records(path, {"a": np.ones(4, dtype=np.float32),
                                  "b": np.ones(4, dtype=np.float32)})
    data = bytearray(path.read_bytes())
    data[-10] ^= 0xFF  # corrupt inside the last payload: length stays valid
    data = data[:-4]   # then truncate to force a failure
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        tensorio.read_records(path)


def test_text_embedding_round_trip():
    text = "model.parts = 4\nseed = 17\n"
    assert tensorio.decode_text(tensorio.encode_text(text)) == text
