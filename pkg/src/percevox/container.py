"""Versioned binary container for named numpy arrays.

Layout: magic "PVCX1", then format version and header length as 64-bit
little-endian integers, then a UTF-8 JSON header (array table with name,
dtype, shape, offset, nbytes; plus free-form metadata), then the raw
little-endian payload, then a CRC-32 of the payload as a 32-bit
little-endian integer.

The writer is fully deterministic: identical arrays and metadata produce
identical files, so checkpoints can be compared byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

MAGIC = b"PVCX1"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """The file is not a valid container or fails integrity checks."""


def _little_endian(arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_container(path, arrays, meta=None):
    """Write named arrays plus a metadata dict to path.

    Array order follows dict insertion order and is preserved by
    load_container, so save -> load -> save is byte-identical.
    """
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = _little_endian(np.asarray(arr))
        blob = arr.tobytes()
        entries.append(
            {
                "name": str(name),
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)

    header = {"arrays": entries, "meta": dict(meta or {})}
    header_bytes = json.dumps(header, separators=(",", ":"), sort_keys=False).encode("utf-8")
    payload = b"".join(blobs)

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQ", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_container(path):
    """Read a container written by save_container.

    Returns (arrays, meta) where arrays is a dict in on-disk order.
    Raises ContainerError on bad magic, unsupported version, truncation,
    or CRC mismatch.
    """
    with open(path, "rb") as fh:
        raw = fh.read()

    fixed = len(MAGIC) + 16
    if len(raw) < fixed + 4:
        raise ContainerError(f"file too short to be a container: {path}")
    if raw[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"bad magic in {path}")
    version, header_len = struct.unpack_from("<QQ", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version} in {path}")
    header_end = fixed + header_len
    if len(raw) < header_end + 4:
        raise ContainerError(f"truncated header in {path}")
    try:
        header = json.loads(raw[fixed:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header in {path}: {exc}") from exc

    payload = raw[header_end:-4]
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise ContainerError(f"payload CRC mismatch in {path}")

    arrays = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise ContainerError(f"array {entry['name']!r} overruns payload in {path}")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header.get("meta", {})
