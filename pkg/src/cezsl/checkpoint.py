"""The "ZSLM" parameter container shared by the embedding model and the CVAE.

Layout (little-endian): magic ``ZSLM``, u16 format version, then per
parameter: u16 name length, UTF-8 name, u32 rows, u32 cols, float64 payload.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ZSLM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(path, params: dict) -> Path:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for name, value in params.items():
        value = np.asarray(value, dtype="<f8")
        if value.ndim != 2:
            raise CheckpointError(f"parameter {name} is not 2-D")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<II", *value.shape))
        chunks.append(np.ascontiguousarray(value).tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def load_params(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a ZSLM checkpoint")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 6
    params = {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            rows, cols = struct.unpack_from("<II", raw, pos)
            pos += 8
            size = 8 * rows * cols
            if pos + size > len(raw):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            params[name] = np.frombuffer(raw, dtype="<f8", count=rows * cols,
                                         offset=pos).reshape(rows, cols).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header ({exc})") from None
    return params
