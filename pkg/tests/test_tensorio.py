import struct

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from motionxfer import tensorio as tio


def test_bundle_layout_is_as_documented():
    blob = tio.encode_bundle({"a": np.array([1.0, 2.0], dtype=np.float32)})
    magic, version, hlen = struct.unpack_from("<4sII", blob)
    assert magic == b"PGT1" and version == 1
    header = blob[12:12 + hlen]
    assert header == b'[{"dtype":"f32","name":"a","offset":0,"shape":[2]}]'
    assert blob[12 + hlen:] == struct.pack("<2f", 1.0, 2.0)


@given(
    arrays(np.float32, st.tuples(st.integers(0, 3), st.integers(1, 4)),
           elements=st.floats(-1e6, 1e6, width=32)),
    arrays(np.float32, st.tuples(st.integers(1, 3),), elements=st.floats(-1, 1, width=32)),
)
def test_bundle_round_trip(a, b):
    out = tio.decode_bundle(tio.encode_bundle({"a": a, "b": torch.from_numpy(b)}))
    assert list(out) == ["a", "b"]
    np.testing.assert_array_equal(out["a"], a)
    np.testing.assert_array_equal(out["b"], b)


def test_scalar_tensor_round_trip():
    out = tio.decode_bundle(tio.encode_bundle({"s": np.float32(3.5)}))
    assert out["s"].shape == () and out["s"] == 3.5


def test_checkpoint_round_trip_bytes(tmp_path):
    tensors = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    meta = {"step": 4, "note": "x"}
    blob = tio.encode_checkpoint(tensors, meta)
    got, got_meta = tio.decode_checkpoint(blob)
    assert got_meta == meta
    assert tio.encode_checkpoint(got, got_meta) == blob


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda b: b[:6], "too short"),
        (lambda b: b"XXXX" + b[4:], "bad magic"),
        (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
        (lambda b: b[:20], "header"),
        (lambda b: b[:-3], "truncated"),
    ],
)
def test_corrupt_bundles_are_reported(mutate, match):
    blob = tio.encode_bundle({"a": np.zeros((4, 4), np.float32)})
    with pytest.raises(tio.CorruptFileError, match=match):
        tio.decode_bundle(mutate(blob))


def test_checkpoint_and_bundle_magics_differ(tmp_path):
    blob = tio.encode_bundle({"a": np.zeros(2, np.float32)})
    with pytest.raises(tio.CorruptFileError, match="magic"):
        tio.decode_checkpoint(blob)


def test_file_helpers(tmp_path):
    p = tmp_path / "x.tns"
    tio.save_bundle(p, {"a": np.ones(3)})
    assert tio.load_bundle(p)["a"].dtype == np.float32
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(tio.CorruptFileError, match=str(p)):
        tio.load_bundle(p)
