"""Sectioned binary checkpoint container.

Layout (all integers little-endian):

    8 bytes   magic "DITLABCK"
    uint32    format version
    uint32    config block length in bytes
    bytes     ModelConfig as UTF-8 ``key=value`` lines
    uint32    number of parameter arrays
    per array, in parameter order:
        uint16   name length, then the UTF-8 name
        uint8    ndim, then ndim x uint32 dimensions
        float32  values, C order
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .model import DiT, ModelConfig

MAGIC = b"DITLABCK"
VERSION = 1


class CheckpointVersionError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: DiT) -> None:
    config = "".join(f"{k}={v}\n" for k, v in model.config.to_dict().items()).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(config)), config,
             struct.pack("<I", len(model.params))]
    for name, arr in model.params.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path, expected_version: int = VERSION) -> DiT:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, clen = struct.unpack_from("<II", raw, 8)
    if version != expected_version:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version} does not match supported version {expected_version}"
        )
    pos = 16
    kv = dict(line.split("=", 1) for line in raw[pos:pos + clen].decode().splitlines() if line)
    config = ModelConfig.from_dict(kv)
    pos += clen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * n
    return DiT(config, params)


def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
