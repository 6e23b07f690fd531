import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dcar import checkpoint
from dcar.checkpoint import CheckpointError


def test_layout_of_a_single_tensor():
    data = checkpoint.dumps({"w": torch.tensor([[1.0, 2.0]])})
    assert data[:8] == b"DCARCKPT"
    assert struct.unpack("<II", data[8:16]) == (1, 1)
    assert struct.unpack("<H", data[16:18]) == (1,)
    assert data[18:19] == b"w"
    assert data[19] == 2
    assert struct.unpack("<II", data[20:28]) == (1, 2)
    assert struct.unpack("<2f", data[28:]) == (1.0, 2.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.text("abcxyz._", min_size=1, max_size=12),
                          st.lists(st.integers(0, 4), max_size=3)), max_size=5, unique_by=lambda t: t[0]))
def test_roundtrip_bit_exact(specs):
    rng = np.random.default_rng(0)
    tensors = {name: torch.from_numpy(np.asarray(rng.normal(size=shape), dtype=np.float32).reshape(shape))
               for name, shape in specs}
    back = checkpoint.loads(checkpoint.dumps(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].numpy().tobytes() == tensors[k].numpy().tobytes()


def test_file_roundtrip(tmp_path):
    t = {"a": torch.arange(6, dtype=torch.float32).view(2, 3), "b": torch.tensor(3.5)}
    p = tmp_path / "x.ckpt"
    checkpoint.save(p, t)
    back = checkpoint.load(p)
    assert torch.equal(back["a"], t["a"]) and back["b"].item() == 3.5
    assert checkpoint.dumps(back) == p.read_bytes()


@pytest.mark.parametrize("mutate", [
    lambda d: b"BADMAGIC" + d[8:],
    lambda d: d[:8] + struct.pack("<I", 99) + d[12:],
    lambda d: d[:-1],
    lambda d: d + b"\x00",
])
def test_corrupt_inputs_rejected(mutate):
    data = checkpoint.dumps({"w": torch.ones(3)})
    with pytest.raises(CheckpointError):
        checkpoint.loads(mutate(data))
