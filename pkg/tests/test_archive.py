import json
import struct

import numpy as np
import pytest

from disentangle_reid.archive import ArchiveError, load_arrays, save_arrays


def test_roundtrip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5]), "e": np.zeros((0, 4))}
    save_arrays(tmp_path / "x.bin", arrays, {"k": [1, 2]})
    out, meta = load_arrays(tmp_path / "x.bin")
    assert meta == {"k": [1, 2]}
    for k, v in arrays.items():
        assert out[k].dtype == np.float32
        np.testing.assert_array_equal(out[k], v.astype(np.float32))


def test_layout_is_little_endian_float32(tmp_path):
    save_arrays(tmp_path / "x.bin", {"w": np.array([1.0, -2.0])})
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw[:8] == b"DRARCH01"
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    assert header["arrays"] == [{"name": "w", "shape": [2], "offset": 0}]
    assert struct.unpack("<2f", raw[16 + hlen:16 + hlen + 8]) == (1.0, -2.0)


def test_corrupt_files(tmp_path):
    p = tmp_path / "x.bin"
    save_arrays(p, {"w": np.ones(4)})
    raw = p.read_bytes()
    p.write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(ArchiveError):
        load_arrays(p)
    p.write_bytes(raw[:-4])
    with pytest.raises(ArchiveError):
        load_arrays(p)
    with pytest.raises(ArchiveError):
        save_arrays(p, {"w": np.array([np.nan])})
