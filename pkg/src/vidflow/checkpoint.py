"""Versioned binary weight checkpoints (magic "CVWT").

Layout: magic, version byte, model-kind string, JSON config record, then
named tensors as (name, dtype code, rank, dims, little-endian payload).
Round-trips are bit-exact: float64 payloads are written verbatim.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ContractError

MAGIC = b"CVWT"
VERSION = 1

_DTYPES = {0x00: "<f4", 0x01: "<f8", 0x02: "<u4"}
_DTYPE_CODES = {np.dtype("float32"): 0x00, np.dtype("float64"): 0x01,
                np.dtype("uint32"): 0x02}


def save_weights(path, kind: str, config: dict, tensors: dict[str, np.ndarray]):
    kind_b = kind.encode()
    config_b = json.dumps(config, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<B", len(kind_b)))
        fh.write(kind_b)
        fh.write(struct.pack("<I", len(config_b)))
        fh.write(config_b)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise ContractError(f"unsupported dtype {arr.dtype} for {name}")
            name_b = name.encode()
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(_DTYPES[code]).tobytes())


def load_weights(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ContractError(f"{path}: bad checkpoint magic {data[:4]!r}")
    off = 4
    version = data[off]
    off += 1
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    kind_len = data[off]
    off += 1
    kind = data[off:off + kind_len].decode()
    off += kind_len
    (config_len,) = struct.unpack_from("<I", data, off)
    off += 4
    config = json.loads(data[off:off + config_len].decode())
    off += config_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode()
        off += name_len
        code, rank = struct.unpack_from("<BB", data, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        dtype = np.dtype(_DTYPES[code])
        nbytes = int(np.prod(dims)) * dtype.itemsize if rank else dtype.itemsize
        payload = data[off:off + nbytes]
        if len(payload) != nbytes:
            raise ContractError(f"{path}: truncated tensor {name}")
        off += nbytes
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return kind, config, tensors
