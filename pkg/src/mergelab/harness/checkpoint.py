"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      4 bytes  b"MLB1"
    version    u32
    count      u32
    manifest   count x (u16 name_len, name utf-8, u8 dtype, u8 ndim,
                        ndim x u64 dim, u64 offset, u64 nbytes)
    data       raw little-endian array bytes; offsets are relative to the
               start of this section
    crc32      u32 over every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from typing import Mapping

import numpy as np

from ..errors import ChecksumError, ContractError

MAGIC = b"MLB1"
VERSION = 1
META_KEY = "__meta__"

DTYPES = {
    0: np.dtype("<f8"),
    1: np.dtype("<f4"),
    2: np.dtype("<i8"),
    3: np.dtype("<i4"),
    4: np.dtype("u1"),
    5: np.dtype("?"),
}
_CODES = {dt: code for code, dt in DTYPES.items()}


def _code(arr: np.ndarray) -> int:
    try:
        return _CODES[arr.dtype.newbyteorder("<")]
    except KeyError:
        raise ContractError(f"dtype {arr.dtype} cannot be stored in a checkpoint") from None


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    """Serialize ``arrays`` (sorted by name) plus optional JSON ``meta``."""
    items = {k: np.asarray(getattr(v, "data", v)) for k, v in arrays.items()}
    if META_KEY in items:
        raise ContractError(f"{META_KEY!r} is reserved")
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode()
        items[META_KEY] = np.frombuffer(blob, dtype=np.uint8)
    manifest = bytearray()
    data = bytearray()
    for name in sorted(items):
        arr = items[name]
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        key = name.encode()
        if len(key) > 0xFFFF or arr.ndim > 0xFF:
            raise ContractError(f"entry {name!r} too large for the manifest")
        manifest += struct.pack("<H", len(key)) + key
        manifest += struct.pack("<BB", code, arr.ndim)
        manifest += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        manifest += struct.pack("<QQ", len(data), len(raw))
        data += raw
    body = MAGIC + struct.pack("<II", VERSION, len(items)) + bytes(manifest) + bytes(data)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    """Inverse of :func:`dumps`; raises ChecksumError on any corruption."""
    if len(blob) < 16:
        raise ChecksumError("checkpoint truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC32 mismatch: checkpoint corrupted")
    if body[:4] != MAGIC:
        raise ChecksumError(f"bad magic {body[:4]!r}")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise ChecksumError(f"unsupported checkpoint version {version}")
    pos = 12
    entries = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode()
            pos += n
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            offset, nbytes = struct.unpack_from("<QQ", body, pos)
            pos += 16
            entries.append((name, code, shape, offset, nbytes))
    except (struct.error, UnicodeDecodeError) as exc:
        raise ChecksumError(f"malformed manifest: {exc}") from None
    arrays: dict[str, np.ndarray] = {}
    for name, code, shape, offset, nbytes in entries:
        if code not in DTYPES:
            raise ChecksumError(f"unknown dtype code {code} for {name!r}")
        dt = DTYPES[code]
        start = pos + offset
        if start + nbytes > len(body) or nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise ChecksumError(f"entry {name!r} out of bounds")
        arrays[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize,
                                     offset=start).reshape(shape).copy()
    meta = None
    if META_KEY in arrays:
        meta = json.loads(arrays.pop(META_KEY).tobytes().decode())
    return arrays, meta


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Atomic write of a checkpoint file."""
    blob = dumps(arrays, meta)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict | None]:
    with open(path, "rb") as fh:
        return loads(fh.read())
