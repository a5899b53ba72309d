"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"CQKL" | u32 version | u64 header_len | header (UTF-8 JSON)
    u32 n_records
    per record: u16 name_len | name (UTF-8) | u8 ndim | u64 dims[ndim] | f64 data

The JSON header always carries ``"config"`` (the model config); trainers add
their own keys. Arrays round-trip bit-exactly.
"""

from __future__ import annotations

import io
import json
import os
import struct
from typing import Dict, Tuple

import numpy as np

MAGIC = b"CQKL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, header: dict, arrays: Dict[str, np.ndarray]) -> None:
    if "config" not in header:
        raise CheckpointError("checkpoint header needs a 'config' entry")
    buf = io.BytesIO()
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        return _parse(blob, path)
    except (struct.error, ValueError, UnicodeDecodeError) as err:
        if isinstance(err, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({err})") from err


def _parse(blob: bytes, path) -> Tuple[dict, Dict[str, np.ndarray]]:
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 16
    header = json.loads(blob[off : off + hlen].decode("utf-8"))
    off += hlen
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nl].decode("utf-8")
        off += nl
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return header, arrays
