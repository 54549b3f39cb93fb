"""The ``BRNET1`` tensor container.

Layout (all integers little-endian)::

    b"BRNET1"
    repeated until EOF:
        uint64  name length in bytes
        bytes   UTF-8 name
        4 x uint64  dims (rows, height, width, channels)
        float32[rows*height*width*channels]  row-major data
"""

import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

MAGIC = b"BRNET1"


class CheckpointError(ValueError):
    pass


def save_tensors(path: Union[str, Path], tensors: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.ndim != 4:
                raise CheckpointError(f"{name}: expected 4 dims, got shape {arr.shape}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<4Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: missing {MAGIC!r} header")
    pos = len(MAGIC)
    out = {}
    while pos < len(blob):
        try:
            (nlen,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dims = struct.unpack_from("<4Q", blob, pos)
            pos += 32
        except struct.error:
            raise CheckpointError(f"{path}: truncated record header at byte {pos}") from None
        count = int(np.prod(dims))
        end = pos + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: record {name!r} truncated")
        out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos = end
    return out


def model_state(model) -> Dict[str, np.ndarray]:
    state = {name: p.data for name, p in model.named_parameters()}
    for name, buf in model.named_buffers():
        state[name] = buf.reshape(1, 1, 1, -1)
    return state


def save_model(path, model) -> None:
    save_tensors(path, model_state(model))


def load_model(path, model) -> None:
    """Copy tensors from ``path`` into ``model`` in place (names must match)."""
    state = load_tensors(path)
    params = dict(model.named_parameters())
    bufs = dict(model.named_buffers())
    expected = set(params) | set(bufs)
    missing = expected - set(state)
    extra = set(state) - expected
    if missing or extra:
        raise CheckpointError(f"checkpoint mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
    for name, p in params.items():
        if state[name].shape != p.data.shape:
            raise CheckpointError(f"{name}: shape {state[name].shape} != {p.data.shape}")
        p.data = state[name].astype(p.data.dtype)
    for name, buf in bufs.items():
        buf[...] = state[name].reshape(buf.shape)
