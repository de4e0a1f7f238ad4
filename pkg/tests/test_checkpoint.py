import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from bladapt import checkpoint as C
from bladapt import network as N


def test_known_bytes_for_single_record():
    blob = C.dumps({"w": np.array([1.0, 2.0], dtype=np.float32)})
    expected = b"BLAD" + struct.pack("<HI", 1, 1) + struct.pack("<H", 1) + b"w" + bytes([0, 1])
    expected += struct.pack("<I", 2) + np.array([1.0, 2.0], "<f4").tobytes()
    assert blob == expected


def test_records_are_sorted_so_bytes_are_canonical():
    a = {"b": np.zeros(2), "a": np.ones((1, 2), dtype=np.float32)}
    b = {"a": np.ones((1, 2), dtype=np.float32), "b": np.zeros(2)}
    assert C.dumps(a) == C.dumps(b)


def test_partition_roundtrip_through_file(tmp_path):
    part = N.init_partition(np.random.default_rng(0))
    C.save(part.flat(), tmp_path / "p.blad")
    back = N.ParameterPartition.from_flat(C.load(tmp_path / "p.blad"))
    assert N.checksum(back.flat()) == N.checksum(part.flat())
    assert all(k.split(".")[0] in ("encoder", "decoder", "denoiser") for k in part.flat())


@pytest.mark.parametrize(
    "mutate, match",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], "version"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\0", "trailing"),
    ],
)
def test_corrupt_checkpoints_are_rejected(mutate, match):
    blob = C.dumps({"w": np.arange(4.0)})
    with pytest.raises(C.CheckpointError, match=match):
        C.loads(mutate(blob))


def test_unsupported_dtype():
    with pytest.raises(C.CheckpointError):
        C.dumps({"i": np.arange(3)})


names = st.text(st.characters(min_codepoint=97, max_codepoint=122), min_size=1, max_size=6)
tensors = st.one_of(
    arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=3)),
    arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=3)),
)


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(names, tensors, max_size=5))
def test_roundtrip_is_bit_exact(params):
    back = C.loads(C.dumps(params))
    assert set(back) == set(params)
    for k, v in params.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()
