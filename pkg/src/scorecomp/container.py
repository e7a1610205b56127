"""SCMP binary container.

Layout::

    b"SCMP" | version (u8) | header length (u32 LE) | UTF-8 JSON header
    | raw little-endian float32 tensor payload | CRC32 of payload (u32 LE)

The header carries arbitrary metadata plus a ``tensors`` directory of
``{"name", "shape", "offset"}`` entries, offsets counted in bytes from the
start of the payload.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MAGIC = b"SCMP"
VERSION = 1
_DTYPE = np.dtype("<f4")


def pack(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = dict(meta)
    header["tensors"] = directory
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return b"".join(
        [
            MAGIC,
            struct.pack("<BI", VERSION, len(hbytes)),
            hbytes,
            payload,
            struct.pack("<I", zlib.crc32(payload)),
        ]
    )


def unpack(blob: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 9 or blob[:4] != MAGIC:
        raise IntegrityError(f"{source}: bad magic")
    version, hlen = struct.unpack_from("<BI", blob, 4)
    if version != VERSION:
        raise IntegrityError(f"{source}: unsupported container version {version}")
    start = 9 + hlen
    if len(blob) < start + 4:
        raise IntegrityError(f"{source}: truncated header")
    try:
        header = json.loads(blob[9:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{source}: corrupt header ({exc})") from None
    payload = blob[start:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    expected = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["tensors"]) * 4
    if len(payload) != expected:
        raise IntegrityError(
            f"{source}: payload is {len(payload)} bytes, directory expects {expected}"
        )
    if zlib.crc32(payload) != crc:
        raise IntegrityError(f"{source}: payload CRC mismatch")
    tensors = {}
    for entry in header.pop("tensors"):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype=_DTYPE, count=n, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float32)
    return header, tensors


def atomic_write(path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    atomic_write(path, pack(meta, tensors))


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return unpack(Path(path).read_bytes(), source=str(path))
