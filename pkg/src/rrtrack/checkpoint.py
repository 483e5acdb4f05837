"""Binary checkpoint format for named tensors.

Layout (all integers little-endian):

    magic "RE3CKPT1" (8 bytes)
    u32 tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8 dtype (0 = f32, 1 = f64)
        u8 rank
        u32 dims[rank]
        raw little-endian data
    u64 FNV-1a checksum of all preceding bytes

Round-trips are bit-exact; a checksum mismatch makes load refuse, so a
single flipped byte anywhere is detected.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RE3CKPT1"
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x00000100000001B3

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    """Corrupt or malformed checkpoint file."""


def _fnv1a_python(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


try:  # numba makes the checksum ~1000x faster on multi-MB files
    import numba

    @numba.njit(cache=True)
    def _fnv1a_numba(arr):  # pragma: no cover - thin jit wrapper
        h = numba.uint64(0xCBF29CE484222325)
        prime = numba.uint64(0x00000100000001B3)
        for i in range(arr.size):
            h = (h ^ numba.uint64(arr[i])) * prime
        return h

    def fnv1a(data: bytes) -> int:
        return int(_fnv1a_numba(np.frombuffer(data, dtype=np.uint8)))

except ImportError:  # pragma: no cover
    fnv1a = _fnv1a_python


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays in insertion order. Only f32/f64 are storable."""
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:32]}...")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(dt, copy=False).tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<Q", fnv1a(body)))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint; refuses on bad magic, checksum or framing."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 + 8:
        raise CheckpointError(f"{path}: file too short")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if fnv1a(body) != stored:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt file)")
    if body[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {body[:8]!r}")
    (count,) = struct.unpack_from("<I", body, 8)
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BB", body, pos)
        pos += 2
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if rank else dt.itemsize
        raw = body[pos:pos + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: truncated tensor {name}")
        pos += nbytes
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor {name}")
        out[name] = np.frombuffer(raw, dtype=dt).reshape(dims).copy()
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} trailing bytes")
    return out
