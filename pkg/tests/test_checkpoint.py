import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from srnn_lab import checkpoint, models, srnn
from srnn_lab.checkpoint import CheckpointError


def test_byte_layout(tmp_path):
    checkpoint.save(tmp_path / "c", b"ABCDE", {"w": np.array([1.5])}, {"k": "v"})
    raw = (tmp_path / "c").read_bytes()
    want = (b"ABCDE" + struct.pack("<I", 4) + b"k=v\n" + struct.pack("<I", 1)
            + struct.pack("<H", 1) + b"w" + struct.pack("<B", 1) + struct.pack("<Q", 1) + struct.pack("<d", 1.5))
    assert raw == want


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text("abc.0123", min_size=1, max_size=8),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4)), max_size=4))
def test_round_trip_bit_exact(tmp_path_factory, arrs):
    path = tmp_path_factory.mktemp("ck") / "c"
    checkpoint.save(path, b"TEST1", arrs, {"a": "1"})
    magic, meta, back = checkpoint.load(path)
    assert magic == b"TEST1" and meta == {"a": "1"}
    assert list(back) == list(arrs)
    for k, v in arrs.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()


def test_truncated(tmp_path):
    checkpoint.save(tmp_path / "c", b"TEST1", {"w": np.ones((3, 3))})
    raw = (tmp_path / "c").read_bytes()
    (tmp_path / "c").write_bytes(raw[:-1])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.load(tmp_path / "c")


def test_trailing_bytes(tmp_path):
    checkpoint.save(tmp_path / "c", b"TEST1", {"w": np.ones(2)})
    with open(tmp_path / "c", "ab") as f:
        f.write(b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.load(tmp_path / "c")


def test_missing(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        checkpoint.load(tmp_path / "none")


def test_bad_magic_length(tmp_path):
    with pytest.raises(ValueError):
        checkpoint.save(tmp_path / "c", b"XY", {})


def test_load_any_dispatch(tmp_path):
    from srnn_lab import baseline

    srnn.save(srnn.init_params(2, 4, 1, [3]), tmp_path / "s")
    baseline.save(baseline.rnn_init(2, 4, 1), tmp_path / "v")
    assert isinstance(models.load_any(tmp_path / "s")[0], srnn.SrnnParams)
    assert isinstance(models.load_any(tmp_path / "v")[0], baseline.VanillaParams)
    checkpoint.save(tmp_path / "x", b"OTHER", {})
    with pytest.raises(CheckpointError, match="unknown magic"):
        models.load_any(tmp_path / "x")
