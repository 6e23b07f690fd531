"""Flat binary tensor container.

Layout (little-endian)::

    b"DCARCKPT" | version u32 | count u32 |
    count x { name_len u16 | name utf-8 | rank u8 | dims u32*rank | f32 payload }
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"DCARCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, torch.Tensor | np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.array(arr, dtype="<f4", order="C")  # keeps 0-d shape, unlike ascontiguousarray
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads(data: bytes) -> dict[str, torch.Tensor]:
    if data[:8] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    tensors: dict[str, torch.Tensor] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"truncated or corrupt checkpoint: {e}") from e
    if off != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors


def save(path: Path, tensors: Mapping[str, torch.Tensor | np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: Path) -> dict[str, torch.Tensor]:
    return loads(Path(path).read_bytes())
