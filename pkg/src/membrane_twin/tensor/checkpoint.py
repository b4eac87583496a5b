"""Binary checkpoint format.

    magic       4 bytes  b"MBCK"
    version     u16
    arch_len    u32, then arch_len bytes of UTF-8 JSON (the architecture id)
    n_params    u32
    per param:  u8 ndim, ndim x u32 dims
    data        float64 little-endian, parameters in declaration order
    crc32       u32 over everything before it
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

MAGIC = b"MBCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arch: dict, arrays) -> bytes:
    arch_bytes = json.dumps(arch, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(arch_bytes)), arch_bytes,
             struct.pack("<I", len(arrays))]
    for a in arrays:
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
    for a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(blob: bytes):
    if len(blob) < 14 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    version, n = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 10
    arch = json.loads(blob[off:off + n].decode())
    off += n
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shapes.append(struct.unpack_from(f"<{ndim}I", blob, off))
        off += 4 * ndim
    arrays = []
    for shape in shapes:
        size = int(np.prod(shape)) if shape else 1
        arrays.append(np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64))
        off += 8 * size
    if off != len(blob) - 4:
        raise CheckpointError("checkpoint payload length mismatch")
    return arch, arrays


def save(path, module, arch: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arch, module.state()))


def load_into(path, module, arch: dict) -> None:
    """Load parameters, refusing a file written for a different architecture."""
    with open(path, "rb") as fh:
        stored_arch, arrays = loads(fh.read())
    if stored_arch != arch:
        raise CheckpointError(f"architecture mismatch: file {stored_arch}, expected {arch}")
    expected = [p.data.shape for p in module.parameters()]
    if [a.shape for a in arrays] != expected:
        raise CheckpointError("parameter shapes do not match the architecture")
    module.load_state(arrays)


def read(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
