"""Flat binary snapshots of a parameter store.

Layout: magic ``SD3C``, u32 format version, u32 entry count, then one
record per parameter (u32 name length, UTF-8 name, u8 dtype tag, u32 rank,
u32 dims, float32 little-endian payload), closed by a CRC32 of everything
before it.  Values are stored as float32, so a load-save round trip is
bit-exact at that precision.
"""

import struct
import zlib

import numpy as np

from .numerics import ParamStore

MAGIC = b"SD3C"
VERSION = 1
DTYPE_F32 = 0


def save_checkpoint(path: str, store: ParamStore, version: int = VERSION) -> None:
    names = sorted(store.names())
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", version)
    out += struct.pack("<I", len(names))
    for name in names:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(store[name].data, dtype="<f4")
        out += struct.pack("<I", len(raw))
        out += raw
        out += struct.pack("<B", DTYPE_F32)
        out += struct.pack("<I", arr.ndim)
        for d in arr.shape:
            out += struct.pack("<I", d)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path: str) -> dict:
    """Read a snapshot back into a plain name -> float64 array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise ValueError("corrupt checkpoint")
    body, tail = blob[:-4], blob[-4:]
    if struct.unpack("<I", tail)[0] != (zlib.crc32(body) & 0xFFFFFFFF):
        raise ValueError("corrupt checkpoint")
    off = 4
    version, count = struct.unpack_from("<II", body, off)
    off += 8
    if version != VERSION:
        raise ValueError(
            f"checkpoint format version {version} unsupported (expected {VERSION})")
    entries = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, off)
            off += 4
            raw = body[off:off + nlen]
            if len(raw) != nlen:
                raise ValueError("corrupt checkpoint")
            name = raw.decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BI", body, off)
            off += 5
            if tag != DTYPE_F32:
                raise ValueError("corrupt checkpoint")
            dims = struct.unpack_from(f"<{rank}I", body, off) if rank else ()
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            payload = body[off:off + 4 * n]
            if len(payload) != 4 * n:
                raise ValueError("corrupt checkpoint")
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
            off += 4 * n
            entries[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise ValueError("corrupt checkpoint") from exc
    if off != len(body):
        raise ValueError("corrupt checkpoint")
    return entries


def restore_into(store: ParamStore, entries: dict) -> None:
    """Copy loaded arrays over matching parameters, shape-checked."""
    for name, arr in entries.items():
        if name not in store:
            raise ValueError(f"checkpoint entry {name!r} has no matching parameter")
        tensor = store[name]
        if tuple(tensor.data.shape) != tuple(arr.shape):
            raise ValueError(f"checkpoint entry {name!r} shape mismatch")
        tensor.data[...] = arr
