# maxprop/weights.py
"""
Versioned little-endian weights file.

    magic   b"MXPW"
    u32     format version
    u32     record count
    record: u16 name length, utf-8 name, u8 ndim, u32 dims[ndim], u8 dtype code, raw values

Records hold every parameter (trainable or not) and every BN running statistic,
so a reloaded model evaluates exactly like the one that was saved.
"""
import logging
import os
import struct
from typing import Dict

import numpy as np

from .errors import WeightsMismatchError
from .layers import Module

logger = logging.getLogger(__name__)

MAGIC = b"MXPW"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


def encode_weights(state: Dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(state))]
    for name, value in state.items():
        array = np.asarray(value)
        dtype = array.dtype.newbyteorder("<")
        if dtype not in _DTYPE_CODES:
            raise WeightsMismatchError(f"Cannot store '{name}' with dtype {array.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        chunks.append(struct.pack("<B", _DTYPE_CODES[dtype]))
        chunks.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(chunks)


def decode_weights(raw: bytes, source: str = "<weights>") -> Dict[str, np.ndarray]:
    if raw[:4] != MAGIC:
        raise WeightsMismatchError(f"{source}: not a weights file (magic {raw[:4]!r})")
    offset = 4

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(raw):
            raise WeightsMismatchError(f"{source}: file truncated at byte {offset}")
        values = struct.unpack_from(fmt, raw, offset)
        offset += size
        return values

    version, count = take("<II")
    if version != FORMAT_VERSION:
        raise WeightsMismatchError(f"{source}: unsupported format version {version}, expected {FORMAT_VERSION}")
    state: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = take("<H")
        name = bytes(take(f"<{length}s")[0]).decode("utf-8")
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        (code,) = take("<B")
        if code not in _CODE_DTYPES:
            raise WeightsMismatchError(f"{source}: unknown dtype code {code} for '{name}'")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(raw):
            raise WeightsMismatchError(f"{source}: values of '{name}' truncated")
        state[name] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise WeightsMismatchError(f"{source}: {len(raw) - offset} trailing bytes after {count} records")
    return state


def save_weights(model: Module, path: os.PathLike) -> None:
    state = model.state_dict()
    with open(path, "wb") as handle:
        handle.write(encode_weights(state))
    logger.info(f"Saved {len(state)} weight records to {path}")


def load_weights(path: os.PathLike) -> Dict[str, np.ndarray]:
    with open(path, "rb") as handle:
        return decode_weights(handle.read(), str(path))


def load_into(model: Module, path: os.PathLike) -> Module:
    """Strictly loads a weights file into ``model``; names and shapes must match."""
    model.load_state_dict(load_weights(path))
    logger.info(f"Loaded weights from {path}")
    return model
