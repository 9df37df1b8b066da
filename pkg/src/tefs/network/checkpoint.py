"""Binary model checkpoints.

Layout (all little-endian)::

    magic        4s   b"TFCK"
    version      H    1
    tag_len      H    length of the UTF-8 architecture tag
    tag          bytes
    seed         q
    n_bands      I
    n_frames     I
    n_arrays     I
    then per array:
        name_len H, name (UTF-8), ndim B, shape (ndim x I), float32 values (row-major)

Arrays hold every trainable parameter followed by the batch-norm running
statistics, in the model's own ordering.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .models import Network, build_architecture

MAGIC = b"TFCK"
VERSION = 1


def checkpoint_bytes(model: Network) -> bytes:
    buf = io.BytesIO()
    tag = model.tag.encode()
    state = model.state_dict()
    buf.write(struct.pack("<4sHH", MAGIC, VERSION, len(tag)))
    buf.write(tag)
    buf.write(struct.pack("<qIII", int(model.seed), *model.input_shape, len(state)))
    for name, arr in state.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes, dtype=np.float32) -> Network:
    view = memoryview(data)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise ValueError("truncated checkpoint")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    magic, version, tag_len = take("<4sHH")
    if magic != MAGIC:
        raise ValueError("not a model checkpoint")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    tag = bytes(view[pos : pos + tag_len]).decode()
    pos += tag_len
    seed, n_bands, n_frames, n_arrays = take("<qIII")
    state = {}
    for _ in range(n_arrays):
        (name_len,) = take("<H")
        name = bytes(view[pos : pos + name_len]).decode()
        pos += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape))
        if pos + 4 * count > len(view):
            raise ValueError(f"truncated checkpoint while reading {name}")
        state[name] = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
    if pos != len(view):
        raise ValueError("trailing bytes after checkpoint arrays")
    model = build_architecture(tag, n_bands, n_frames, seed=seed, dtype=dtype)
    model.load_state_dict(state)
    return model


def save_checkpoint(model: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path, dtype=np.float32) -> Network:
    return model_from_bytes(Path(path).read_bytes(), dtype=dtype)
