import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from coin.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text("abcdefgh.", min_size=1, max_size=8),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4)), max_size=5))
def test_round_trip_is_bit_exact(tmp_path_factory, tensors):
    path = tmp_path_factory.mktemp("ck") / "x.ckpt"
    save_checkpoint(path, tensors, {"step": 3})
    back, meta = load_checkpoint(path)
    assert meta == {"step": 3}
    assert set(back) == set(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == np.asarray(v, order="C").tobytes()


def test_identical_contents_give_identical_bytes(tmp_path):
    t = {"b": np.arange(3.0), "a": np.eye(2)}
    save_checkpoint(tmp_path / "1.ckpt", t, {"x": 1})
    save_checkpoint(tmp_path / "2.ckpt", dict(reversed(list(t.items()))), {"x": 1})
    assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()


def test_header_layout(tmp_path):
    save_checkpoint(tmp_path / "c.ckpt", {"w": np.array([1.5])})
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    version, hlen = struct.unpack("<IQ", raw[8:20])
    assert version == 1
    assert struct.unpack("<d", raw[20 + hlen:])[0] == 1.5


@pytest.mark.parametrize("mutate", [lambda b: b"garbage", lambda b: b[:8] + struct.pack("<IQ", 7, 2) + b[20:],
                                    lambda b: b[:-4]])
def test_corrupted_files_mention_format_version(tmp_path, mutate):
    p = tmp_path / "c.ckpt"
    save_checkpoint(p, {"w": np.ones(3)})
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(CheckpointError, match="format version"):
        load_checkpoint(p)
