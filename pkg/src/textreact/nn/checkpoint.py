"""Little-endian checkpoint container.

    magic "TXRN" | u32 version | u32 len + UTF-8 JSON config
    u32 n_params, then per parameter:
        u32 name len | name | u32 rank | u32 dims[rank] | float32 data
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from ..errors import TextReactError

MAGIC = b"TXRN"
VERSION = 1


class CheckpointError(TextReactError, ValueError):
    pass


def save_checkpoint(path, config: dict, state: dict[str, torch.Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        blob = json.dumps(config, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            raw = name.encode("utf-8")
            arr = tensor.detach().cpu().to(torch.float32).numpy()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a TXRN checkpoint")
    pos = 4
    (version,) = struct.unpack_from("<I", data, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos += 4
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    config = json.loads(data[pos : pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        state[name] = torch.from_numpy(arr.astype(np.float32))
    return config, state
